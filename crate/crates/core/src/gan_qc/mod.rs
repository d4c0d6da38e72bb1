//! GAN-based quality control: the MisGAN masking operator and adversarial
//! loss terms, and AnoGAN anomaly scoring with a gradient-free latent search.
//!
//! Networks are opaque evaluators. A discriminator is anything that maps an
//! image to a real score (closures work), so the loss algebra can be checked
//! against small analytic networks.

mod anogan;

pub use anogan::{
    anomaly_score, latent_search, latent_search_traced, threshold_classify, AffineGenerator,
    AnoSearchConfig, AnomalyResult, GeneratorFormatError, PooledFeatures, SearchStep, Verdict,
};

use crate::image::Image;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GanError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

fn check_shape(a: &Image, b: &Image) -> Result<(), GanError> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(GanError::ShapeMismatch {
            expected: (a.width(), a.height()),
            got: (b.width(), b.height()),
        })
    }
}

/// Maps a latent vector to an image.
pub trait Generator: Sync {
    fn latent_dim(&self) -> usize;
    fn generate(&self, z: &[f64]) -> Image;
}

/// Intermediate feature representation used for feature matching.
pub trait FeatureMap: Sync {
    fn features(&self, image: &Image) -> Vec<f64>;
}

impl<F: Fn(&Image) -> Vec<f64> + Sync> FeatureMap for F {
    fn features(&self, image: &Image) -> Vec<f64> {
        self(image)
    }
}

/// Produces a mask from a noise vector.
pub trait MaskGenerator {
    fn generate_mask(&self, eps: &[f64]) -> BinaryMask;
}

/// Completes a masked image given auxiliary noise.
pub trait Imputer {
    fn impute(&self, x: &Image, mask: &BinaryMask, w: &[f64]) -> Image;
}

/// Observation mask: 1 where a pixel is observed, 0 where it is missing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Option<Self> {
        (bits.len() == width * height).then_some(BinaryMask {
            width,
            height,
            bits,
        })
    }

    pub fn ones(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    /// Accepts only images whose every value is exactly 0 or 1.
    pub fn from_image(image: &Image) -> Option<Self> {
        let mut bits = Vec::with_capacity(image.len());
        for &v in image.as_slice() {
            match v {
                0.0 => bits.push(false),
                1.0 => bits.push(true),
                _ => return None,
            }
        }
        BinaryMask::new(image.width(), image.height(), bits)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn observed_fraction(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.bits.iter().filter(|&&b| b).count() as f64 / self.bits.len() as f64
    }

    pub fn to_image(&self) -> Image {
        let data = self
            .bits
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect();
        Image::new(self.width, self.height, data).expect("mask dims are consistent")
    }
}

/// `x ⊙ m + τ (1 − m)`: observed pixels kept, missing pixels set to `tau`.
pub fn apply_mask(x: &Image, mask: &BinaryMask, tau: f64) -> Result<Image, GanError> {
    if x.width() != mask.width || x.height() != mask.height {
        return Err(GanError::ShapeMismatch {
            expected: (x.width(), x.height()),
            got: (mask.width, mask.height),
        });
    }
    let data = x
        .as_slice()
        .iter()
        .zip(&mask.bits)
        .map(|(&v, &keep)| if keep { v } else { tau })
        .collect();
    Ok(Image::new(x.width(), x.height(), data).expect("shape checked"))
}

fn batch_mean<T>(
    batch: &[T],
    score: impl Fn(&T) -> Result<f64, GanError>,
) -> Result<f64, GanError> {
    if batch.is_empty() {
        return Err(GanError::EmptyBatch);
    }
    let mut sum = 0.0;
    for item in batch {
        sum += score(item)?;
    }
    Ok(sum / batch.len() as f64)
}

/// Data-critic loss: mean critic score of masked real images minus that of
/// masked generated images.
pub fn misgan_data_loss(
    critic: impl Fn(&Image) -> f64,
    real: &[(Image, BinaryMask)],
    fake: &[(Image, BinaryMask)],
    tau: f64,
) -> Result<f64, GanError> {
    let score = |(x, m): &(Image, BinaryMask)| apply_mask(x, m, tau).map(|v| critic(&v));
    Ok(batch_mean(real, score)? - batch_mean(fake, score)?)
}

/// Mask-critic loss: mean critic score of real masks minus generated masks.
pub fn misgan_mask_loss(
    critic: impl Fn(&Image) -> f64,
    real: &[BinaryMask],
    fake: &[BinaryMask],
) -> Result<f64, GanError> {
    let score = |m: &BinaryMask| Ok(critic(&m.to_image()));
    Ok(batch_mean(real, score)? - batch_mean(fake, score)?)
}

/// Imputer-critic loss: mean critic score of generated complete images
/// minus that of imputed images.
pub fn misgan_imputer_loss(
    critic: impl Fn(&Image) -> f64,
    generated: &[Image],
    imputed: &[Image],
) -> Result<f64, GanError> {
    let score = |x: &Image| Ok(critic(x));
    Ok(batch_mean(generated, score)? - batch_mean(imputed, score)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MisganLosses {
    pub data: f64,
    pub mask: f64,
    pub imputer: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlayerObjectives {
    pub mask: f64,
    pub data: f64,
    pub imputer: f64,
}

pub const DEFAULT_ZETA: f64 = 0.2;
pub const DEFAULT_PHI: f64 = 0.1;

/// Objectives of the alternating players: the mask player sees
/// `L_m + ζ L_x`, the data player `L_x + φ L_i`, the imputer `L_i`.
pub fn combined_objectives(losses: MisganLosses, zeta: f64, phi: f64) -> PlayerObjectives {
    PlayerObjectives {
        mask: losses.mask + zeta * losses.data,
        data: losses.data + phi * losses.imputer,
        imputer: losses.imputer,
    }
}

/// Summed absolute pixel difference between a query and its reconstruction.
pub fn residual_loss(x: &Image, reconstruction: &Image) -> Result<f64, GanError> {
    check_shape(x, reconstruction)?;
    Ok(x.as_slice()
        .iter()
        .zip(reconstruction.as_slice())
        .map(|(a, b)| (a - b).abs())
        .sum())
}

/// Summed absolute difference of feature vectors.
pub fn discrimination_loss(fx: &[f64], fgz: &[f64]) -> Result<f64, GanError> {
    if fx.len() != fgz.len() {
        return Err(GanError::LengthMismatch {
            left: fx.len(),
            right: fgz.len(),
        });
    }
    Ok(fx.iter().zip(fgz).map(|(a, b)| (a - b).abs()).sum())
}
