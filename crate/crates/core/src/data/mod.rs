//! Part-annotated datasets, category splits and episodic sampling.

mod io;
mod shapes;
mod split;
mod synth;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use io::{ingest_dataset, MANIFEST_FILE, SPLITS_FILE};
pub use shapes::{PartShapes, Shape};
pub use split::{build_splits, read_splits, write_splits, Partition, SplitSpec, SPLIT_COUNT};
pub use synth::{generate_synthetic_dataset, SynthConfig, TEMPLATE_NAMES};

/// Label of the background class in every mask.
pub const BACKGROUND: u8 = 0;

/// Integer label grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height * width != data.len() || height == 0 || width == 0 {
            return Err(Error::Argument(format!(
                "mask of {height}x{width} cannot hold {} labels",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self {
            height,
            width,
            data: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Pixel count per label `0..=max_label`.
    pub fn histogram(&self, max_label: u8) -> Vec<usize> {
        let mut h = vec![0; max_label as usize + 1];
        for &v in &self.data {
            if let Some(slot) = h.get_mut(v as usize) {
                *slot += 1;
            }
        }
        h
    }

    /// Flat indices of the pixels carrying `label`.
    pub fn indices_of(&self, label: u8) -> Vec<usize> {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| (v == label).then_some(i))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartClass {
    pub id: u8,
    pub raw_name: String,
    pub normalized_name: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    pub parts: Vec<PartClass>,
}

impl Category {
    /// Builds a category from raw part names; ids are assigned `1..=N` in order.
    pub fn new(name: &str, raw_parts: &[&str]) -> Result<Self> {
        if raw_parts.is_empty() || raw_parts.len() > 254 {
            return Err(Error::Config(format!(
                "category {name} must declare between 1 and 254 parts"
            )));
        }
        let parts = raw_parts
            .iter()
            .enumerate()
            .map(|(i, raw)| PartClass {
                id: (i + 1) as u8,
                raw_name: raw.to_string(),
                normalized_name: normalize_part_name(raw, name),
            })
            .collect();
        Ok(Self {
            name: name.to_string(),
            parts,
        })
    }

    pub fn part_count(&self) -> usize {
        self.parts.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.parts.iter().enumerate() {
            if p.id as usize != i + 1 {
                return Err(Error::Config(format!(
                    "category {}: part ids must be 1..N in order, found {} at position {}",
                    self.name,
                    p.id,
                    i + 1
                )));
            }
            if p.normalized_name != normalize_part_name(&p.raw_name, &self.name) {
                return Err(Error::Config(format!(
                    "category {}: part {:?} has inconsistent normalized name {:?}",
                    self.name, p.raw_name, p.normalized_name
                )));
            }
        }
        if self.parts.is_empty() {
            return Err(Error::Config(format!("category {} has no parts", self.name)));
        }
        Ok(())
    }
}

fn words(s: &str) -> impl Iterator<Item = String> + '_ {
    s.split(|c: char| c.is_whitespace() || c == '_' || c == '-')
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Cross-category key of a part: the lowercased final word of `raw_name`
/// once the words of the category name are removed ("Car body" → "body").
pub fn normalize_part_name(raw_name: &str, category: &str) -> String {
    let cat: Vec<String> = words(category).collect();
    let kept: Vec<String> = words(raw_name).filter(|w| !cat.contains(w)).collect();
    kept.last()
        .cloned()
        .or_else(|| words(raw_name).last())
        .unwrap_or_else(|| raw_name.trim().to_lowercase())
}

/// One image with its part mask. Pixel values lie in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[3, h, w]`.
    pub image: Tensor,
    pub mask: Mask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleLocator {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    /// Analytic part shapes when the sample came from the generator.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shapes: Vec<PartShapes>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub image_size: (usize, usize),
    pub categories: Vec<Category>,
    pub samples_by_category: BTreeMap<String, Vec<SampleLocator>>,
    samples: BTreeMap<String, Vec<Arc<Sample>>>,
}

impl DatasetIndex {
    pub(crate) fn from_parts(
        root: PathBuf,
        image_size: (usize, usize),
        categories: Vec<Category>,
        samples_by_category: BTreeMap<String, Vec<SampleLocator>>,
        samples: BTreeMap<String, Vec<Arc<Sample>>>,
    ) -> Self {
        Self {
            root,
            image_size,
            categories,
            samples_by_category,
            samples,
        }
    }

    pub fn category(&self, name: &str) -> Option<&Category> {
        self.categories.iter().find(|c| c.name == name)
    }

    pub fn category_names(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.name.clone()).collect()
    }

    pub fn samples(&self, category: &str) -> &[Arc<Sample>] {
        self.samples.get(category).map_or(&[], Vec::as_slice)
    }

    pub fn sample_count(&self) -> usize {
        self.samples.values().map(Vec::len).sum()
    }

    /// Every normalized part name in the given categories, plus the background key.
    pub fn part_keys<'a>(&self, categories: impl IntoIterator<Item = &'a String>) -> Vec<String> {
        let mut keys: Vec<String> = categories
            .into_iter()
            .filter_map(|c| self.category(c))
            .flat_map(|c| c.parts.iter().map(|p| p.normalized_name.clone()))
            .collect();
        keys.push(BACKGROUND_KEY.to_string());
        keys.sort();
        keys.dedup();
        keys
    }
}

/// Part key and label text used for the background class.
pub const BACKGROUND_KEY: &str = "background";

/// One few-shot task. The query mask is carried for loss and metric
/// computation; inference reads only the query image.
#[derive(Clone, Debug)]
pub struct Episode {
    pub id: String,
    pub category: Category,
    pub support: Vec<Arc<Sample>>,
    pub query: Arc<Sample>,
    pub k_shot: usize,
}

impl Episode {
    /// Normalized label key per class `0..=N`, background first.
    pub fn class_keys(&self) -> Vec<String> {
        std::iter::once(BACKGROUND_KEY.to_string())
            .chain(self.category.parts.iter().map(|p| p.normalized_name.clone()))
            .collect()
    }
}

/// Draws one episode from a uniformly chosen category of `partition`.
pub fn sample_episode<R: Rng + ?Sized>(
    index: &DatasetIndex,
    split: &SplitSpec,
    partition: Partition,
    k_shot: usize,
    rng: &mut R,
) -> Result<Episode> {
    let names: Vec<String> = split.categories(partition).iter().cloned().collect();
    sample_episode_from(index, &names, k_shot, rng)
}

/// Draws one episode from a uniformly chosen category among `categories`
/// that holds at least `k_shot + 1` samples.
pub fn sample_episode_from<R: Rng + ?Sized>(
    index: &DatasetIndex,
    categories: &[String],
    k_shot: usize,
    rng: &mut R,
) -> Result<Episode> {
    if k_shot == 0 {
        return Err(Error::Argument("k_shot must be at least 1".into()));
    }
    let eligible: Vec<&String> = categories
        .iter()
        .filter(|c| index.samples(c).len() > k_shot)
        .collect();
    if eligible.is_empty() {
        let detail: Vec<String> = categories
            .iter()
            .map(|c| format!("{c} ({} samples)", index.samples(c).len()))
            .collect();
        return Err(Error::Sampling(format!(
            "no category has the {} samples a {k_shot}-shot episode needs: {}",
            k_shot + 1,
            detail.join(", ")
        )));
    }
    let name = eligible[rng.random_range(0..eligible.len())];
    let category = index
        .category(name)
        .ok_or_else(|| Error::Sampling(format!("category {name} missing from the index")))?
        .clone();
    let pool = index.samples(name);
    let picks = rand::seq::index::sample(rng, pool.len(), k_shot + 1).into_vec();
    let support: Vec<Arc<Sample>> = picks[..k_shot].iter().map(|&i| pool[i].clone()).collect();
    let query = pool[picks[k_shot]].clone();
    let id = format!(
        "{name}:{}->{}",
        support.iter().map(|s| s.id.as_str()).collect::<Vec<_>>().join("+"),
        query.id
    );
    Ok(Episode {
        id,
        category,
        support,
        query,
        k_shot,
    })
}

/// Rebuilds an episode from an id of the form `category:s1+s2->query`.
pub fn episode_from_id(index: &DatasetIndex, id: &str) -> Result<Episode> {
    let bad = || Error::Lookup(format!("episode id {id:?}"));
    let (name, rest) = id.split_once(':').ok_or_else(bad)?;
    let (support, query) = rest.split_once("->").ok_or_else(bad)?;
    let category = index.category(name).ok_or_else(bad)?.clone();
    let find = |sid: &str| {
        index
            .samples(name)
            .iter()
            .find(|s| s.id == sid)
            .cloned()
            .ok_or_else(|| Error::Lookup(format!("sample {name}/{sid}")))
    };
    let support = support.split('+').map(find).collect::<Result<Vec<_>>>()?;
    Ok(Episode {
        id: id.to_string(),
        category,
        k_shot: support.len(),
        support,
        query: find(query)?,
    })
}
