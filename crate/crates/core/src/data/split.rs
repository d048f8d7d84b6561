use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::io::SPLITS_FILE;
use super::DatasetIndex;
use crate::error::{Error, Result};
use crate::json;

pub const SPLIT_COUNT: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Base,
    Novel,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub split_id: usize,
    pub base: BTreeSet<String>,
    pub novel: BTreeSet<String>,
}

impl SplitSpec {
    pub fn categories(&self, partition: Partition) -> &BTreeSet<String> {
        match partition {
            Partition::Base => &self.base,
            Partition::Novel => &self.novel,
        }
    }
}

/// Stable digest of the category names, independent of their order.
fn fingerprint(index: &DatasetIndex) -> u64 {
    let mut names = index.category_names();
    names.sort();
    let digest = Sha256::digest(names.join("\n").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Number of novel categories: two out of eleven, rounded up, at least one.
fn novel_count(n: usize) -> usize {
    (2 * n).div_ceil(11).max(1)
}

/// Seeded round-robin split. Categories are shuffled once per
/// `(category set, seed)`; split `s` takes the `s`-th consecutive window of
/// the shuffled order as its novel set, so the four splits cover every
/// category whenever four windows are long enough to do so.
pub fn build_splits(index: &DatasetIndex, split_id: usize, seed: u64) -> Result<SplitSpec> {
    let n = index.categories.len();
    if n < 3 {
        return Err(Error::Config(format!(
            "splitting needs at least 3 categories, the index has {n}"
        )));
    }
    if split_id >= SPLIT_COUNT {
        return Err(Error::Argument(format!(
            "split_id must be in 0..{SPLIT_COUNT}, got {split_id}"
        )));
    }
    let mut order = index.category_names();
    order.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(fingerprint(index) ^ seed);
    order.shuffle(&mut rng);
    let k = novel_count(n);
    let novel: BTreeSet<String> = (0..k)
        .map(|j| order[(split_id * k + j) % n].clone())
        .collect();
    let base = order
        .into_iter()
        .filter(|c| !novel.contains(c))
        .collect();
    Ok(SplitSpec {
        split_id,
        base,
        novel,
    })
}

/// Writes `splits.json` with all four splits for `seed`.
pub fn write_splits(root: &Path, index: &DatasetIndex, seed: u64) -> Result<()> {
    let mut all = BTreeMap::new();
    for s in 0..SPLIT_COUNT {
        let spec = build_splits(index, s, seed)?;
        all.insert(
            s.to_string(),
            serde_json::json!({ "base": spec.base, "novel": spec.novel }),
        );
    }
    let doc = serde_json::json!({ "seed": seed, "splits": all });
    json::write_pretty(&root.join(SPLITS_FILE), &doc)
}

#[derive(Deserialize)]
struct SplitEntry {
    base: BTreeSet<String>,
    novel: BTreeSet<String>,
}

#[derive(Deserialize)]
struct SplitsDoc {
    splits: BTreeMap<String, SplitEntry>,
}

pub fn read_splits(root: &Path) -> Result<BTreeMap<usize, SplitSpec>> {
    let path = root.join(SPLITS_FILE);
    let doc: SplitsDoc = json::read(&path)?;
    let mut out = BTreeMap::new();
    for (k, e) in doc.splits {
        let split_id: usize = k
            .parse()
            .map_err(|_| Error::validation(&path, format!("split key {k:?} is not an integer")))?;
        if !e.base.is_disjoint(&e.novel) {
            return Err(Error::validation(
                &path,
                format!("split {split_id} has overlapping base and novel sets"),
            ));
        }
        out.insert(
            split_id,
            SplitSpec {
                split_id,
                base: e.base,
                novel: e.novel,
            },
        );
    }
    Ok(out)
}
