//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json          categories, parts, sample locators, image size
//! <root>/splits.json            split_id -> {base, novel}
//! <root>/images/<cat>/<id>.png  8-bit RGB
//! <root>/masks/<cat>/<id>.png   8-bit single channel, value = part id, 0 = background
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::synth::rgb8_to_tensor;
use super::{Category, DatasetIndex, Mask, PartClass, Sample, SampleLocator};
use crate::error::{Error, Result};
use crate::json;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPLITS_FILE: &str = "splits.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ManifestPart {
    id: u8,
    name: String,
    normalized: String,
}

#[derive(Serialize, Deserialize)]
struct ManifestCategory {
    name: String,
    parts: Vec<ManifestPart>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    image_size: [usize; 2],
    categories: Vec<ManifestCategory>,
    samples: BTreeMap<String, Vec<SampleLocator>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    generator: Option<serde_json::Value>,
}

/// Writes images, masks and the manifest. `pixels` holds interleaved RGB and
/// label bytes per sample, in locator order.
pub(crate) fn write_dataset(
    index: &DatasetIndex,
    pixels: &BTreeMap<String, Vec<(Vec<u8>, Vec<u8>)>>,
    generator: Option<serde_json::Value>,
) -> Result<()> {
    let root = &index.root;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let (h, w) = index.image_size;
    for (cat, locs) in &index.samples_by_category {
        let bufs = &pixels[cat];
        for (loc, (rgb, labels)) in locs.iter().zip(bufs) {
            let img_path = root.join(&loc.image);
            let mask_path = root.join(&loc.mask);
            for p in [&img_path, &mask_path] {
                if let Some(parent) = p.parent() {
                    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
            }
            let img = image::RgbImage::from_raw(w as u32, h as u32, rgb.clone())
                .ok_or_else(|| Error::Argument("image buffer size mismatch".into()))?;
            img.save(&img_path).map_err(|e| Error::Image {
                path: img_path.clone(),
                source: e,
            })?;
            let m = image::GrayImage::from_raw(w as u32, h as u32, labels.clone())
                .ok_or_else(|| Error::Argument("mask buffer size mismatch".into()))?;
            m.save(&mask_path).map_err(|e| Error::Image {
                path: mask_path.clone(),
                source: e,
            })?;
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        image_size: [h, w],
        categories: index
            .categories
            .iter()
            .map(|c| ManifestCategory {
                name: c.name.clone(),
                parts: c
                    .parts
                    .iter()
                    .map(|p| ManifestPart {
                        id: p.id,
                        name: p.raw_name.clone(),
                        normalized: p.normalized_name.clone(),
                    })
                    .collect(),
            })
            .collect(),
        samples: index.samples_by_category.clone(),
        generator,
    };
    json::write_pretty(&root.join(MANIFEST_FILE), &manifest)
}

fn load_rgb(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok((img.into_raw(), h as usize, w as usize))
}

fn load_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    if img.color() != image::ColorType::L8 {
        return Err(Error::validation(
            path,
            format!("mask must be 8-bit single channel, found {:?}", img.color()),
        ));
    }
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    Mask::new(h as usize, w as usize, gray.into_raw())
}

/// Loads and validates a dataset directory. Every image and mask is read
/// eagerly and checked against the manifest.
pub fn ingest_dataset(root: &Path) -> Result<DatasetIndex> {
    let manifest_path = root.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(Error::validation(root, "no manifest"));
    }
    let manifest: Manifest = json::read(&manifest_path)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::validation(
            &manifest_path,
            format!("unsupported format_version {}", manifest.format_version),
        ));
    }
    let [h, w] = manifest.image_size;
    let mut categories = Vec::new();
    for mc in &manifest.categories {
        let cat = Category {
            name: mc.name.clone(),
            parts: mc
                .parts
                .iter()
                .map(|p| PartClass {
                    id: p.id,
                    raw_name: p.name.clone(),
                    normalized_name: p.normalized.clone(),
                })
                .collect(),
        };
        cat.validate()
            .map_err(|e| Error::validation(&manifest_path, e.to_string()))?;
        categories.push(cat);
    }
    let mut names: Vec<&str> = categories.iter().map(|c| c.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|p| p[0] == p[1]) {
        return Err(Error::validation(&manifest_path, "duplicate category name"));
    }
    let mut samples = BTreeMap::new();
    for (cat_name, locs) in &manifest.samples {
        let cat = categories
            .iter()
            .find(|c| &c.name == cat_name)
            .ok_or_else(|| {
                Error::validation(
                    &manifest_path,
                    format!("samples listed for undeclared category {cat_name}"),
                )
            })?;
        let n = cat.part_count();
        let mut loaded = Vec::with_capacity(locs.len());
        for loc in locs {
            let img_path = root.join(&loc.image);
            let mask_path = root.join(&loc.mask);
            let (rgb, ih, iw) = load_rgb(&img_path)?;
            let mask = load_mask(&mask_path)?;
            if (ih, iw) != (mask.height(), mask.width()) {
                return Err(Error::validation(
                    &mask_path,
                    format!(
                        "mask is {}x{} but image {} is {ih}x{iw}",
                        mask.height(),
                        mask.width(),
                        img_path.display()
                    ),
                ));
            }
            if (ih, iw) != (h, w) {
                return Err(Error::validation(
                    &img_path,
                    format!("image is {ih}x{iw}, manifest declares {h}x{w}"),
                ));
            }
            if mask.max_label() as usize > n {
                return Err(Error::validation(
                    &mask_path,
                    format!(
                        "mask value {} exceeds the {n} parts of category {cat_name}",
                        mask.max_label()
                    ),
                ));
            }
            loaded.push(Arc::new(Sample {
                id: loc.id.clone(),
                image: rgb8_to_tensor(&rgb, ih, iw),
                mask,
            }));
        }
        samples.insert(cat_name.clone(), loaded);
    }
    Ok(DatasetIndex::from_parts(
        PathBuf::from(root),
        (h, w),
        categories,
        manifest.samples,
        samples,
    ))
}
