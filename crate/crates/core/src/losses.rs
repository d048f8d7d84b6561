//! Correlation logits, softmax, contrast losses, fused prediction and mIoU.
//!
//! Logit volumes are stored pixel-major: entry `(pixel, k)` lives at
//! `pixel * K + k`, where column `k` belongs to class `classes[k]`.

use serde::{Deserialize, Serialize};

use crate::data::Mask;
use crate::error::{Error, Result};
use crate::prototypes::upsample_labels;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Visual,
    Textual,
    Fused,
}

/// How features and prototypes are compared.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogitMode {
    /// Raw inner product.
    #[default]
    InnerProduct,
    /// Cosine similarity divided by a temperature.
    Cosine { temperature: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogitVolume {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<u8>,
    pub data: Vec<f64>,
    pub branch: Branch,
}

impl LogitVolume {
    pub fn new(
        height: usize,
        width: usize,
        classes: Vec<u8>,
        data: Vec<f64>,
        branch: Branch,
    ) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Argument("logit volume needs at least one class".into()));
        }
        if data.len() != height * width * classes.len() {
            return Err(Error::Argument(format!(
                "{} logits do not fill {height}x{width}x{}",
                data.len(),
                classes.len()
            )));
        }
        Ok(Self {
            height,
            width,
            classes,
            data,
            branch,
        })
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        let k = self.classes.len();
        &self.data[p * k..(p + 1) * k]
    }

    /// Per-pixel argmax, mapped to class ids; ties go to the lowest column.
    pub fn argmax_labels(&self) -> Mask {
        let labels = (0..self.pixels())
            .map(|p| {
                let row = self.pixel(p);
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                self.classes[best]
            })
            .collect();
        Mask::new(self.height, self.width, labels).expect("volume dims")
    }
}

/// `f[p, k] = ⟨F[:, p], prototypes[k]⟩`.
pub fn correlate(
    features: &Tensor,
    classes: &[u8],
    prototypes: &[Vec<f64>],
    branch: Branch,
) -> Result<LogitVolume> {
    let s = features.shape();
    if s.len() != 3 {
        return Err(Error::Argument(format!("features must be [c, h, w], got {s:?}")));
    }
    if classes.len() != prototypes.len() {
        return Err(Error::Argument("one class id per prototype is required".into()));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if let Some(bad) = prototypes.iter().find(|p| p.len() != c) {
        return Err(Error::Argument(format!(
            "prototype of length {} does not match {c} feature channels",
            bad.len()
        )));
    }
    let p = h * w;
    let k = prototypes.len();
    let fd = features.data();
    let mut out = vec![0.0; p * k];
    for ch in 0..c {
        let plane = &fd[ch * p..(ch + 1) * p];
        for (kk, proto) in prototypes.iter().enumerate() {
            let wv = proto[ch];
            for (pix, f) in plane.iter().enumerate() {
                out[pix * k + kk] += f * wv;
            }
        }
    }
    LogitVolume::new(h, w, classes.to_vec(), out, branch)
}

/// Per-pixel softmax over classes, stabilized by subtracting the row maximum.
pub fn softmax_prob(logits: &LogitVolume) -> LogitVolume {
    let k = logits.class_count();
    let mut out = vec![0.0; logits.data.len()];
    for p in 0..logits.pixels() {
        let row = logits.pixel(p);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out[p * k..(p + 1) * k];
        let mut sum = 0.0;
        for (d, &l) in dst.iter_mut().zip(row) {
            *d = (l - max).exp();
            sum += *d;
        }
        dst.iter_mut().for_each(|d| *d /= sum);
    }
    LogitVolume {
        data: out,
        ..logits.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub pixels: usize,
    /// Every pixel was excluded; `value` is zero by convention.
    pub empty: bool,
}

/// Mean over pixels of `−ln p[truth]`, counting only pixels whose ground
/// truth is in `valid` and has a column in `probs`.
pub fn contrast_loss(probs: &LogitVolume, truth: &Mask, valid: &[u8]) -> Result<LossValue> {
    if (truth.height(), truth.width()) != (probs.height, probs.width) {
        return Err(Error::Argument(format!(
            "mask {}x{} vs probability volume {}x{}",
            truth.height(),
            truth.width(),
            probs.height,
            probs.width
        )));
    }
    let mut total = 0.0;
    let mut n = 0;
    for (p, &t) in truth.data().iter().enumerate() {
        if !valid.contains(&t) {
            continue;
        }
        let Some(col) = probs.classes.iter().position(|&c| c == t) else {
            continue;
        };
        total += -probs.pixel(p)[col].ln();
        n += 1;
    }
    if n == 0 {
        log::warn!("contrast loss: every pixel was excluded");
        return Ok(LossValue {
            value: 0.0,
            pixels: 0,
            empty: true,
        });
    }
    Ok(LossValue {
        value: total / n as f64,
        pixels: n,
        empty: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub visual: f64,
    pub textual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            visual: 1.0,
            textual: 1.0,
        }
    }
}

pub fn total_loss(visual: f64, textual: f64, weights: LossWeights) -> Result<f64> {
    if !visual.is_finite() || !textual.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss terms: visual {visual}, textual {textual}"
        )));
    }
    Ok(weights.visual * visual + weights.textual * textual)
}

/// `α·visual + (1 − α)·textual` over identical class columns.
pub fn fuse_logits(visual: &LogitVolume, textual: &LogitVolume, alpha: f64) -> Result<LogitVolume> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Argument(format!("fusion weight {alpha} outside [0, 1]")));
    }
    if visual.classes != textual.classes
        || (visual.height, visual.width) != (textual.height, textual.width)
    {
        return Err(Error::Argument(
            "visual and textual logits cover different classes or pixels".into(),
        ));
    }
    let data = visual
        .data
        .iter()
        .zip(&textual.data)
        .map(|(v, t)| alpha * v + (1.0 - alpha) * t)
        .collect();
    LogitVolume::new(
        visual.height,
        visual.width,
        visual.classes.clone(),
        data,
        Branch::Fused,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationPrediction {
    /// Labels at image resolution.
    pub labels: Mask,
    /// Labels at feature resolution.
    pub feature_labels: Mask,
    pub probabilities: Option<LogitVolume>,
}

/// Argmax of the (optionally fused) logits, upsampled by nearest neighbor to
/// `height × width`.
pub fn segment_from_logits(
    visual: &LogitVolume,
    textual: Option<&LogitVolume>,
    alpha: f64,
    stride: usize,
    height: usize,
    width: usize,
    keep_probabilities: bool,
) -> Result<SegmentationPrediction> {
    let fused = match textual {
        Some(t) => fuse_logits(visual, t, alpha)?,
        None => visual.clone(),
    };
    let feature_labels = fused.argmax_labels();
    let labels = upsample_labels(&feature_labels, stride, height, width);
    Ok(SegmentationPrediction {
        labels,
        feature_labels,
        probabilities: keep_probabilities.then(|| softmax_prob(&fused)),
    })
}

/// Segments query features against visual and, optionally, textual
/// prototypes of the same classes.
#[allow(clippy::too_many_arguments)]
pub fn predict_segmentation(
    query: &Tensor,
    classes: &[u8],
    visual: &[Vec<f64>],
    textual: Option<&[Vec<f64>]>,
    alpha: f64,
    stride: usize,
    height: usize,
    width: usize,
) -> Result<SegmentationPrediction> {
    if classes.is_empty() {
        return Err(Error::Argument("no valid class to predict".into()));
    }
    let v = correlate(query, classes, visual, Branch::Visual)?;
    let t = textual
        .map(|t| correlate(query, classes, t, Branch::Textual))
        .transpose()?;
    segment_from_logits(&v, t.as_ref(), alpha, stride, height, width, false)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    /// IoU per class `0..=N`; `None` where prediction and truth are both empty.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

impl MiouReport {
    pub fn valid_classes(&self) -> Vec<u8> {
        self.per_class
            .iter()
            .enumerate()
            .filter_map(|(k, v)| v.map(|_| k as u8))
            .collect()
    }
}

/// Intersection over union per class `0..=n_parts` at image resolution,
/// averaged over classes whose union is nonempty.
pub fn miou(pred: &Mask, truth: &Mask, n_parts: usize) -> Result<MiouReport> {
    if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
        return Err(Error::Argument(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            truth.height(),
            truth.width()
        )));
    }
    let n = n_parts + 1;
    let mut inter = vec![0usize; n];
    let mut union = vec![0usize; n];
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        let (p, t) = (p as usize, t as usize);
        if p == t {
            if p < n {
                inter[p] += 1;
                union[p] += 1;
            }
        } else {
            if p < n {
                union[p] += 1;
            }
            if t < n {
                union[t] += 1;
            }
        }
    }
    let per_class: Vec<Option<f64>> = inter
        .iter()
        .zip(&union)
        .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
        .collect();
    let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if valid.is_empty() {
        0.0
    } else {
        valid.iter().sum::<f64>() / valid.len() as f64
    };
    Ok(MiouReport { per_class, mean })
}
