//! Procedural part-annotated images.
//!
//! Every category is a fixed layout of parts drawn from a shared vocabulary
//! (body, head, limb, ...). Each vocabulary part has its own color and
//! texture family, which categories tint slightly, so the same part looks
//! alike across categories. Parts are painted in declaration order; a pixel
//! takes the label of the last part whose shapes contain its center, which
//! makes masks exact by construction.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::io::write_dataset;
use super::shapes::{PartShapes, Shape};
use super::{Category, DatasetIndex, Mask, Sample, SampleLocator};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub categories: usize,
    pub samples_per_category: usize,
    pub image_size: usize,
    /// Object-center shift, as a fraction of the image size.
    pub translate_jitter: f64,
    /// Relative object-scale variation.
    pub scale_jitter: f64,
    /// Rotation range in radians.
    pub rotate_jitter: f64,
    /// Per-part color offset range.
    pub color_jitter: f64,
    /// Per-pixel Gaussian noise std.
    pub pixel_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            categories: 6,
            samples_per_category: 40,
            image_size: 64,
            translate_jitter: 0.08,
            scale_jitter: 0.15,
            rotate_jitter: 0.25,
            color_jitter: 0.08,
            pixel_noise: 0.03,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.categories < 3 {
            return Err(Error::Config(format!(
                "at least 3 categories are required, got {}",
                self.categories
            )));
        }
        if self.categories > TEMPLATES.len() {
            return Err(Error::Config(format!(
                "the generator knows {} categories, {} requested",
                TEMPLATES.len(),
                self.categories
            )));
        }
        if self.samples_per_category == 0 {
            return Err(Error::Config("samples_per_category must be positive".into()));
        }
        if self.image_size < 8 {
            return Err(Error::Config("image_size must be at least 8".into()));
        }
        let ranges = [
            self.translate_jitter,
            self.scale_jitter,
            self.rotate_jitter,
            self.color_jitter,
            self.pixel_noise,
        ];
        if ranges.iter().any(|v| !v.is_finite() || *v < 0.0) || self.scale_jitter >= 1.0 {
            return Err(Error::Config("jitter ranges must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Shape in object coordinates, where the object spans roughly `[-1, 1]²`.
#[derive(Clone, Copy)]
enum Proto {
    E(f64, f64, f64, f64, f64),
    R(f64, f64, f64, f64, f64),
}
use Proto::{E, R};

struct Template {
    name: &'static str,
    parts: &'static [(&'static str, &'static [Proto])],
}

const TEMPLATES: &[Template] = &[
    Template {
        name: "Quadruped",
        parts: &[
            ("body", &[E(0.0, 0.0, 0.55, 0.28, 0.0)]),
            ("head", &[E(0.68, -0.3, 0.22, 0.18, 0.0)]),
            (
                "limb",
                &[
                    R(-0.38, 0.42, 0.07, 0.22, 0.0),
                    R(-0.18, 0.44, 0.07, 0.22, 0.0),
                    R(0.2, 0.44, 0.07, 0.22, 0.0),
                    R(0.4, 0.42, 0.07, 0.22, 0.0),
                ],
            ),
            ("tail", &[R(-0.7, -0.2, 0.2, 0.05, -0.6)]),
        ],
    },
    Template {
        name: "Biped",
        parts: &[
            ("body", &[R(0.0, 0.0, 0.24, 0.34, 0.0)]),
            ("head", &[E(0.0, -0.58, 0.2, 0.2, 0.0)]),
            (
                "limb",
                &[
                    R(-0.12, 0.62, 0.07, 0.26, 0.0),
                    R(0.12, 0.62, 0.07, 0.26, 0.0),
                    R(-0.36, -0.02, 0.07, 0.28, 0.2),
                    R(0.36, -0.02, 0.07, 0.28, -0.2),
                ],
            ),
        ],
    },
    Template {
        name: "Bird",
        parts: &[
            ("body", &[E(0.0, 0.05, 0.42, 0.26, 0.0)]),
            ("head", &[E(0.48, -0.28, 0.17, 0.16, 0.0)]),
            ("wing", &[E(-0.05, -0.12, 0.32, 0.13, 0.35)]),
            ("tail", &[R(-0.55, 0.12, 0.2, 0.07, 0.3)]),
        ],
    },
    Template {
        name: "Fish",
        parts: &[
            ("body", &[E(0.0, 0.0, 0.58, 0.3, 0.0)]),
            (
                "fin",
                &[E(0.0, -0.34, 0.22, 0.09, 0.2), E(0.05, 0.34, 0.18, 0.08, -0.2)],
            ),
            ("tail", &[R(-0.72, 0.0, 0.14, 0.24, 0.0)]),
        ],
    },
    Template {
        name: "Car",
        parts: &[
            ("body", &[R(0.0, 0.05, 0.72, 0.22, 0.0)]),
            ("window", &[R(0.08, -0.28, 0.36, 0.12, 0.0)]),
            (
                "wheel",
                &[E(-0.42, 0.32, 0.16, 0.16, 0.0), E(0.42, 0.32, 0.16, 0.16, 0.0)],
            ),
        ],
    },
    Template {
        name: "Snake",
        parts: &[
            (
                "body",
                &[
                    E(-0.5, 0.1, 0.22, 0.1, 0.5),
                    E(-0.2, 0.15, 0.22, 0.1, -0.4),
                    E(0.1, 0.05, 0.22, 0.1, 0.5),
                    E(0.38, 0.0, 0.2, 0.1, -0.3),
                ],
            ),
            ("head", &[E(0.62, -0.08, 0.14, 0.11, 0.0)]),
        ],
    },
    Template {
        name: "Airplane",
        parts: &[
            ("body", &[E(0.0, 0.0, 0.72, 0.12, 0.0)]),
            ("wing", &[R(0.05, 0.0, 0.12, 0.62, 0.15)]),
            ("tail", &[R(-0.62, -0.15, 0.07, 0.2, 0.0)]),
        ],
    },
    Template {
        name: "Reptile",
        parts: &[
            ("body", &[E(0.0, 0.0, 0.45, 0.18, 0.0)]),
            ("head", &[E(0.55, 0.0, 0.15, 0.12, 0.0)]),
            (
                "limb",
                &[
                    R(-0.25, 0.25, 0.05, 0.14, 0.4),
                    R(0.25, 0.25, 0.05, 0.14, -0.4),
                    R(-0.25, -0.25, 0.05, 0.14, -0.4),
                    R(0.25, -0.25, 0.05, 0.14, 0.4),
                ],
            ),
            ("tail", &[R(-0.65, 0.05, 0.25, 0.045, 0.15)]),
        ],
    },
    Template {
        name: "Boat",
        parts: &[
            ("body", &[R(0.0, 0.35, 0.62, 0.14, 0.0)]),
            ("sail", &[R(0.0, -0.15, 0.28, 0.34, 0.0)]),
        ],
    },
    Template {
        name: "Bottle",
        parts: &[
            ("body", &[R(0.0, 0.15, 0.26, 0.52, 0.0)]),
            ("cap", &[R(0.0, -0.5, 0.12, 0.1, 0.0)]),
        ],
    },
    Template {
        name: "Bicycle",
        parts: &[
            (
                "wheel",
                &[E(-0.45, 0.25, 0.28, 0.28, 0.0), E(0.45, 0.25, 0.28, 0.28, 0.0)],
            ),
            ("body", &[R(0.0, 0.0, 0.45, 0.05, -0.3)]),
        ],
    },
    Template {
        name: "Robot",
        parts: &[
            ("body", &[R(0.0, 0.05, 0.3, 0.3, 0.0)]),
            ("head", &[R(0.0, -0.5, 0.18, 0.16, 0.0)]),
            (
                "limb",
                &[
                    R(-0.42, 0.05, 0.08, 0.3, 0.0),
                    R(0.42, 0.05, 0.08, 0.3, 0.0),
                    R(-0.14, 0.6, 0.08, 0.24, 0.0),
                    R(0.14, 0.6, 0.08, 0.24, 0.0),
                ],
            ),
        ],
    },
];

/// Category names in generation order; `categories = n` uses the first `n`.
pub const TEMPLATE_NAMES: [&str; 12] = [
    "Quadruped", "Biped", "Bird", "Fish", "Car", "Snake", "Airplane", "Reptile", "Boat", "Bottle",
    "Bicycle", "Robot",
];

#[derive(Clone, Copy)]
enum Pattern {
    Stripes { angle: f64, period: f64 },
    Dots { period: f64 },
    Checker { period: f64 },
    Solid,
}

struct Look {
    color: [f64; 3],
    pattern: Pattern,
    contrast: f64,
}

fn vocabulary_look(part: &str) -> Look {
    let (color, pattern, contrast) = match part {
        "body" => ([0.78, 0.45, 0.22], Pattern::Stripes { angle: 0.0, period: 6.0 }, 0.12),
        "head" => ([0.92, 0.82, 0.32], Pattern::Dots { period: 5.0 }, 0.12),
        "limb" => ([0.32, 0.3, 0.78], Pattern::Stripes { angle: PI / 2.0, period: 3.0 }, 0.14),
        "tail" => ([0.28, 0.72, 0.32], Pattern::Checker { period: 4.0 }, 0.14),
        "wing" => ([0.86, 0.32, 0.62], Pattern::Stripes { angle: PI / 4.0, period: 4.0 }, 0.14),
        "fin" => ([0.28, 0.76, 0.82], Pattern::Dots { period: 3.0 }, 0.12),
        "wheel" => ([0.16, 0.16, 0.18], Pattern::Checker { period: 3.0 }, 0.1),
        "window" => ([0.62, 0.86, 0.96], Pattern::Solid, 0.0),
        "sail" => ([0.96, 0.95, 0.86], Pattern::Stripes { angle: 0.0, period: 8.0 }, 0.08),
        "cap" => ([0.86, 0.14, 0.14], Pattern::Solid, 0.0),
        _ => ([0.5, 0.5, 0.5], Pattern::Solid, 0.0),
    };
    Look {
        color,
        pattern,
        contrast,
    }
}

fn pattern_value(pattern: Pattern, x: f64, y: f64, phase: f64) -> f64 {
    match pattern {
        Pattern::Stripes { angle, period } => {
            (2.0 * PI * (x * angle.cos() + y * angle.sin()) / period + phase).sin()
        }
        Pattern::Dots { period } => {
            (2.0 * PI * x / period + phase).cos() * (2.0 * PI * y / period + phase).cos()
        }
        Pattern::Checker { period } => {
            let s = (PI * x / period + phase).sin() * (PI * y / period + phase).sin();
            s.signum()
        }
        Pattern::Solid => 0.0,
    }
}

fn place(proto: Proto, center: (f64, f64), scale: f64, rot: f64, mirror: bool) -> Shape {
    let (mut px, py, a, b, mut ang) = match proto {
        E(x, y, a, b, t) | R(x, y, a, b, t) => (x, y, a, b, t),
    };
    if mirror {
        px = -px;
        ang = -ang;
    }
    let (s, c) = rot.sin_cos();
    let cx = center.0 + scale * (c * px - s * py);
    let cy = center.1 + scale * (s * px + c * py);
    match proto {
        E(..) => Shape::Ellipse {
            cx,
            cy,
            rx: a * scale,
            ry: b * scale,
            angle: ang + rot,
        },
        R(..) => Shape::Rect {
            cx,
            cy,
            half_w: a * scale,
            half_h: b * scale,
            angle: ang + rot,
        },
    }
}

fn render<R: Rng>(
    template: &Template,
    template_idx: usize,
    config: &SynthConfig,
    rng: &mut R,
) -> (Vec<u8>, Vec<u8>, Vec<PartShapes>) {
    let size = config.image_size;
    let sz = size as f64;
    let center = (
        sz / 2.0 + rng.random_range(-1.0..=1.0) * config.translate_jitter * sz,
        sz / 2.0 + rng.random_range(-1.0..=1.0) * config.translate_jitter * sz,
    );
    let scale = 0.36 * sz * (1.0 + rng.random_range(-1.0..=1.0) * config.scale_jitter);
    let rot = rng.random_range(-1.0..=1.0) * config.rotate_jitter;
    let mirror = rng.random_bool(0.5);

    let parts: Vec<PartShapes> = template
        .parts
        .iter()
        .enumerate()
        .map(|(i, (_, protos))| PartShapes {
            part_id: (i + 1) as u8,
            shapes: protos
                .iter()
                .map(|&p| place(p, center, scale, rot, mirror))
                .collect(),
        })
        .collect();

    // Category tint is a fixed function of the template so it is shared by
    // every sample of the category.
    let tint: [f64; 3] =
        std::array::from_fn(|c| 0.07 * ((template_idx as f64) * 1.7 + c as f64 * 2.3).sin());
    let looks: Vec<(Look, [f64; 3], f64)> = template
        .parts
        .iter()
        .map(|(name, _)| {
            let look = vocabulary_look(name);
            let jitter: [f64; 3] =
                std::array::from_fn(|_| rng.random_range(-1.0..=1.0) * config.color_jitter);
            let phase = rng.random_range(0.0..2.0 * PI);
            (look, jitter, phase)
        })
        .collect();

    let bg_base: [f64; 3] = {
        let gray = rng.random_range(0.25..0.7);
        std::array::from_fn(|_| gray + rng.random_range(-0.12..0.12))
    };
    let bg_freq = rng.random_range(0.5..2.0);
    let bg_angle = rng.random_range(0.0..2.0 * PI);
    let noise = Normal::new(0.0, config.pixel_noise.max(1e-12)).expect("finite std");

    let mut image = vec![0u8; 3 * size * size];
    let mut mask = vec![0u8; size * size];
    for row in 0..size {
        for col in 0..size {
            let label = parts
                .iter()
                .rev()
                .find(|p| p.contains_pixel(row, col))
                .map_or(0, |p| p.part_id);
            let (x, y) = (col as f64, row as f64);
            let rgb: [f64; 3] = if label == 0 {
                let wave = 0.08
                    * (2.0 * PI * bg_freq * (x * bg_angle.cos() + y * bg_angle.sin()) / sz).sin();
                std::array::from_fn(|c| bg_base[c] + wave)
            } else {
                let (look, jitter, phase) = &looks[label as usize - 1];
                let t = look.contrast * pattern_value(look.pattern, x, y, *phase);
                std::array::from_fn(|c| look.color[c] + tint[c] + jitter[c] + t)
            };
            mask[row * size + col] = label;
            for c in 0..3 {
                let v = if config.pixel_noise > 0.0 {
                    rgb[c] + noise.sample(rng)
                } else {
                    rgb[c]
                };
                image[(row * size + col) * 3 + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    (image, mask, parts)
}

/// Converts interleaved 8-bit RGB into a `[3, h, w]` tensor in `[0, 1]`.
pub(crate) fn rgb8_to_tensor(rgb: &[u8], height: usize, width: usize) -> Tensor {
    let plane = height * width;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f64 / 255.0;
        }
    }
    Tensor::from_vec(&[3, height, width], data).expect("rgb buffer size")
}

/// Renders the dataset, writes it under `root` and returns its index.
pub fn generate_synthetic_dataset(
    config: &SynthConfig,
    seed: u64,
    root: &Path,
) -> Result<DatasetIndex> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = config.image_size;
    let mut categories = Vec::new();
    let mut locators = BTreeMap::new();
    let mut samples = BTreeMap::new();
    let mut pixels = BTreeMap::new();
    for (t_idx, template) in TEMPLATES.iter().take(config.categories).enumerate() {
        let raw: Vec<String> = template
            .parts
            .iter()
            .map(|(p, _)| format!("{} {}", template.name, p))
            .collect();
        let raw_refs: Vec<&str> = raw.iter().map(String::as_str).collect();
        categories.push(Category::new(template.name, &raw_refs)?);
        let mut locs = Vec::new();
        let mut cat_samples = Vec::new();
        let mut cat_pixels = Vec::new();
        for s in 0..config.samples_per_category {
            let (rgb, labels, shapes) = render(template, t_idx, config, &mut rng);
            let id = format!("{s:04}");
            locs.push(SampleLocator {
                id: id.clone(),
                image: format!("images/{}/{id}.png", template.name).into(),
                mask: format!("masks/{}/{id}.png", template.name).into(),
                shapes,
            });
            cat_samples.push(Arc::new(Sample {
                id,
                image: rgb8_to_tensor(&rgb, size, size),
                mask: Mask::new(size, size, labels.clone())?,
            }));
            cat_pixels.push((rgb, labels));
        }
        locators.insert(template.name.to_string(), locs);
        samples.insert(template.name.to_string(), cat_samples);
        pixels.insert(template.name.to_string(), cat_pixels);
    }
    let index = DatasetIndex::from_parts(
        root.to_path_buf(),
        (size, size),
        categories,
        locators,
        samples,
    );
    let meta = serde_json::json!({ "config": config, "seed": seed });
    write_dataset(&index, &pixels, Some(meta))?;
    // splits.json records the splits a default run (split_seed 0) trains on.
    super::split::write_splits(root, &index, 0)?;
    Ok(index)
}
