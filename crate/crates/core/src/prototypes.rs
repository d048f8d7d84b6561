//! Part-level visual prototypes by masked average pooling.

use crate::autograd::{Tape, Var};
use crate::data::Mask;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Nearest-neighbor label downsampling. Feature cell `(i, j)` takes the label
/// of image pixel `(i·stride + stride/2, j·stride + stride/2)`. The mask is
/// treated as padded with background up to the next stride multiple.
pub fn downsample_mask(mask: &Mask, stride: usize) -> Mask {
    let stride = stride.max(1);
    let (h, w) = (mask.height().div_ceil(stride), mask.width().div_ceil(stride));
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let y = i * stride + stride / 2;
            let x = j * stride + stride / 2;
            let label = if y < mask.height() && x < mask.width() {
                mask.get(y, x)
            } else {
                0
            };
            out.push(label);
        }
    }
    Mask::new(h, w, out).expect("nonempty grid")
}

/// Nearest-neighbor upsampling of a feature-resolution label grid to
/// `height × width` image pixels: pixel `(y, x)` reads cell `(y / stride, x / stride)`.
pub fn upsample_labels(labels: &Mask, stride: usize, height: usize, width: usize) -> Mask {
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let i = (y / stride).min(labels.height() - 1);
            let j = (x / stride).min(labels.width() - 1);
            out.push(labels.get(i, j));
        }
    }
    Mask::new(height, width, out).expect("nonempty grid")
}

fn check_dims(features: &Tensor, mask: &Mask) -> Result<()> {
    let s = features.shape();
    if s.len() != 3 || s[1] != mask.height() || s[2] != mask.width() {
        return Err(Error::Argument(format!(
            "feature map {s:?} and mask {}x{} disagree spatially",
            mask.height(),
            mask.width()
        )));
    }
    Ok(())
}

/// Mean feature vector over the pixels labeled `class`, or `None` when the
/// class has no pixel.
pub fn masked_average_pool(features: &Tensor, mask: &Mask, class: u8) -> Result<Option<Vec<f64>>> {
    pool_shots(&[features], &[mask], class)
}

fn pool_shots(features: &[&Tensor], masks: &[&Mask], class: u8) -> Result<Option<Vec<f64>>> {
    let Some(first) = features.first() else {
        return Err(Error::Argument("at least one support shot is required".into()));
    };
    let c = first.shape().first().copied().unwrap_or(0);
    let mut sum = vec![0.0; c];
    let mut count = 0usize;
    for (f, m) in features.iter().zip(masks) {
        check_dims(f, m)?;
        if f.shape()[0] != c {
            return Err(Error::Argument("support shots disagree on channel count".into()));
        }
        let p = m.height() * m.width();
        for idx in m.indices_of(class) {
            for (ch, s) in sum.iter_mut().enumerate() {
                *s += f.data()[ch * p + idx];
            }
            count += 1;
        }
    }
    if count == 0 {
        return Ok(None);
    }
    sum.iter_mut().for_each(|s| *s /= count as f64);
    Ok(Some(sum))
}

/// Prototypes `V_0..V_N` (index 0 is background) with per-class presence.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualPrototypeSet {
    prototypes: Vec<Option<Vec<f64>>>,
}

impl VisualPrototypeSet {
    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn present(&self, class: u8) -> bool {
        matches!(self.prototypes.get(class as usize), Some(Some(_)))
    }

    /// The prototype of a present class. Reading an absent class is an error.
    pub fn get(&self, class: u8) -> Result<&[f64]> {
        match self.prototypes.get(class as usize) {
            Some(Some(v)) => Ok(v),
            Some(None) => Err(Error::Contract(format!("class {class} has no support pixels"))),
            None => Err(Error::Argument(format!("class {class} out of range"))),
        }
    }

    pub fn present_classes(&self) -> Vec<u8> {
        (0..self.prototypes.len() as u8)
            .filter(|&k| self.present(k))
            .collect()
    }
}

/// Pools every class `0..=n_parts` over the union of the support shots'
/// pixels. `masks` must already be at feature resolution.
pub fn compute_prototype_set(
    features: &[Tensor],
    masks: &[Mask],
    n_parts: usize,
) -> Result<VisualPrototypeSet> {
    if features.is_empty() || features.len() != masks.len() {
        return Err(Error::Argument(
            "need one feature-resolution mask per support shot".into(),
        ));
    }
    let fs: Vec<&Tensor> = features.iter().collect();
    let ms: Vec<&Mask> = masks.iter().collect();
    let prototypes = (0..=n_parts as u8)
        .map(|k| pool_shots(&fs, &ms, k))
        .collect::<Result<_>>()?;
    Ok(VisualPrototypeSet { prototypes })
}

/// Records the pooled prototype of `class` on the tape, or `None` if absent.
pub fn prototype_on(
    tape: &mut Tape,
    features: &[Var],
    masks: &[Mask],
    class: u8,
) -> Result<Option<Var>> {
    let mut selections = Vec::with_capacity(masks.len());
    for (&f, m) in features.iter().zip(masks) {
        let s = tape.shape(f);
        if s.len() != 3 || s[1] != m.height() || s[2] != m.width() {
            return Err(Error::Argument(format!(
                "feature map {s:?} and mask {}x{} disagree spatially",
                m.height(),
                m.width()
            )));
        }
        selections.push(m.indices_of(class));
    }
    if selections.iter().all(Vec::is_empty) {
        return Ok(None);
    }
    tape.masked_mean(features, &selections).map(Some)
}

/// Spatial mean over every pixel of every support shot.
pub fn global_feature_on(tape: &mut Tape, features: &[Var]) -> Result<Var> {
    let selections: Vec<Vec<usize>> = features
        .iter()
        .map(|&f| {
            let s = tape.shape(f);
            (0..s[1] * s[2]).collect()
        })
        .collect();
    tape.masked_mean(features, &selections)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_mask_downsamples_to_constant() {
        let m = Mask::filled(16, 16, 2);
        let d = downsample_mask(&m, 8);
        assert_eq!(d, Mask::filled(2, 2, 2));
    }

    #[test]
    fn center_pixel_rule() {
        let m = Mask::new(2, 2, vec![1, 1, 2, 2]).unwrap();
        let d = downsample_mask(&m, 2);
        assert_eq!(d.data(), &[2]);
    }

    #[test]
    fn stride_one_is_identity() {
        let data: Vec<u8> = (0..20).map(|i| ((i / 5 + i % 5) % 2) as u8).collect();
        let m = Mask::new(4, 5, data).unwrap();
        assert_eq!(downsample_mask(&m, 1), m);
    }

    #[test]
    fn padded_cells_read_background() {
        // 10 rows at stride 8 → 2 cells; the second cell's center row 12 is padding.
        let m = Mask::filled(10, 8, 3);
        let d = downsample_mask(&m, 8);
        assert_eq!(d.data(), &[3, 0]);
    }

    #[test]
    fn upsample_repeats_cells() {
        let l = Mask::new(1, 2, vec![1, 2]).unwrap();
        let u = upsample_labels(&l, 2, 2, 3);
        assert_eq!(u.data(), &[1, 1, 2, 1, 1, 2]);
    }

    #[test]
    fn single_pixel_prototype_equals_feature() {
        let f = Tensor::from_vec(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = Mask::new(1, 2, vec![0, 1]).unwrap();
        assert_eq!(masked_average_pool(&f, &m, 1).unwrap(), Some(vec![2.0, 4.0]));
        assert_eq!(masked_average_pool(&f, &m, 3).unwrap(), None);
    }

    #[test]
    fn dimension_mismatch_is_an_argument_error() {
        let f = Tensor::zeros(&[2, 2, 2]);
        let m = Mask::filled(3, 2, 0);
        assert!(matches!(masked_average_pool(&f, &m, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn absent_classes_are_flagged() {
        let f = Tensor::zeros(&[2, 1, 2]);
        let m = Mask::new(1, 2, vec![0, 2]).unwrap();
        let set = compute_prototype_set(&[f], &[m], 2).unwrap();
        assert_eq!(set.present_classes(), vec![0, 2]);
        assert!(matches!(set.get(1), Err(Error::Contract(_))));
    }
}
