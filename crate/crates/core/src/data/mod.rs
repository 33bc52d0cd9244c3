//! Samples, dataset directories, augmentation and a procedural camouflage
//! generator.
//!
//! A dataset root holds `Imgs/` and `GT/` with matching file stems.

pub mod augment;
pub mod loader;
pub mod synthetic;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use augment::{augment, AugmentConfig};
pub use loader::{Dataset, SplitCheck};
pub use synthetic::{generate_synthetic, materialize, SyntheticSpec};

/// Per-channel statistics of the pretraining corpus.
pub const MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const STD: [f32; 3] = [0.229, 0.224, 0.225];

/// A square RGB image in `[0, 1]` (planar, `3 x size x size`) and its
/// binary mask (`size x size`).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub size: usize,
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
}

impl Sample {
    pub fn new(size: usize, image: Vec<f32>, mask: Vec<u8>) -> Self {
        assert_eq!(image.len(), 3 * size * size);
        assert_eq!(mask.len(), size * size);
        Self { size, image, mask }
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m > 0).count() as f64 / self.mask.len() as f64
    }

    pub fn mask_bool(&self) -> Vec<bool> {
        self.mask.iter().map(|&m| m > 0).collect()
    }
}

/// Stacks samples into a normalised image batch `[N, 3, S, S]` and a mask
/// batch `[N, 1, S, S]`.
pub fn to_batch<T: Scalar>(samples: &[Sample]) -> (Tensor<T>, Tensor<T>) {
    let s = samples[0].size;
    let plane = s * s;
    let mut img = Vec::with_capacity(samples.len() * 3 * plane);
    let mut gt = Vec::with_capacity(samples.len() * plane);
    for smp in samples {
        assert_eq!(smp.size, s, "samples in a batch must share a size");
        for c in 0..3 {
            img.extend(smp.image[c * plane..(c + 1) * plane].iter().map(|&v| T::c(f64::from((v - MEAN[c]) / STD[c]))));
        }
        gt.extend(smp.mask.iter().map(|&m| if m > 0 { T::one() } else { T::zero() }));
    }
    let n = samples.len();
    (Tensor::from_vec(&[n, 3, s, s], img), Tensor::from_vec(&[n, 1, s, s], gt))
}

#[cfg(test)]
mod tests;
