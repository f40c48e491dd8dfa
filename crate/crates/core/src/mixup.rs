//! Class-mask mixing of a source image onto a target image.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::scenegen::IGNORE;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MixError {
    #[error("label map has no non-ignore classes")]
    NoClasses,
    #[error("resolution mismatch: {0:?} vs {1:?}")]
    Resolution(Vec<usize>, Vec<usize>),
}

/// Pixels of the source whose label is in `selected_classes`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub mask: Vec<bool>,
    pub selected_classes: BTreeSet<u8>,
}

impl BinaryMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Mask as a `[1, h, w]` tensor of 0/1.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![1, self.height, self.width], data).expect("mask size")
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self { width, height, mask: vec![value; width * height], selected_classes: BTreeSet::new() }
    }
}

/// Shuffles the classes present in `labels` and keeps the first `ceil(n / 2)`.
pub fn build_class_mask(labels: &[u8], width: usize, height: usize, rng: &mut impl Rng) -> Result<BinaryMask, MixError> {
    if labels.len() != width * height {
        return Err(MixError::Resolution(vec![labels.len()], vec![height, width]));
    }
    let present: BTreeSet<u8> = labels.iter().copied().filter(|&l| l != IGNORE).collect();
    if present.is_empty() {
        return Err(MixError::NoClasses);
    }
    let mut classes: Vec<u8> = present.into_iter().collect();
    classes.shuffle(rng);
    let selected: BTreeSet<u8> = classes[..classes.len().div_ceil(2)].iter().copied().collect();
    let mask = labels.iter().map(|l| selected.contains(l)).collect();
    Ok(BinaryMask { width, height, mask, selected_classes: selected })
}

fn check(mask: &BinaryMask, shape: &[usize]) -> Result<(), MixError> {
    if shape.len() != 3 || shape[1] != mask.height || shape[2] != mask.width {
        return Err(MixError::Resolution(vec![mask.height, mask.width], shape.to_vec()));
    }
    Ok(())
}

/// `M * source + (1 - M) * target` for planar `[c, h, w]` images.
pub fn mix(source: &Tensor, mask: &BinaryMask, target: &Tensor) -> Result<Tensor, MixError> {
    check(mask, source.shape())?;
    if source.shape() != target.shape() {
        return Err(MixError::Resolution(source.shape().to_vec(), target.shape().to_vec()));
    }
    let hw = mask.mask.len();
    let data = source
        .data()
        .iter()
        .zip(target.data())
        .enumerate()
        .map(|(i, (&s, &t))| if mask.mask[i % hw] { s } else { t })
        .collect();
    Ok(Tensor::new(source.shape().to_vec(), data).expect("same shape"))
}

/// Source label where the mask is set, target pseudo-label elsewhere.
pub fn mixed_label(source: &[u8], mask: &BinaryMask, target_pseudo: &[u8]) -> Result<Vec<u8>, MixError> {
    let n = mask.mask.len();
    if source.len() != n || target_pseudo.len() != n {
        return Err(MixError::Resolution(vec![source.len()], vec![target_pseudo.len(), n]));
    }
    Ok(mask.mask.iter().zip(source.iter().zip(target_pseudo)).map(|(&m, (&s, &t))| if m { s } else { t }).collect())
}
