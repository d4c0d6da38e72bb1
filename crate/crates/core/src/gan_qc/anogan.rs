//! Anomaly scoring by latent search: find the latent code whose generated
//! image best explains the query, then score the leftover mismatch.

use super::{discrimination_loss, residual_loss, FeatureMap, GanError, Generator};
use crate::image::Image;
use byteorder::{ByteOrder, LittleEndian};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnoSearchConfig {
    pub lambda: f64,
    pub restarts: usize,
    pub iterations: usize,
    pub step_decay: f64,
    pub initial_step: f64,
    /// Divide the residual by pixel count and the feature term by feature
    /// count, so scores are comparable across resolutions.
    pub normalize: bool,
    pub seed: u64,
}

impl Default for AnoSearchConfig {
    fn default() -> Self {
        AnoSearchConfig {
            lambda: 0.1,
            restarts: 8,
            iterations: 200,
            step_decay: 0.5,
            initial_step: 0.5,
            normalize: false,
            seed: 0,
        }
    }
}

impl AnoSearchConfig {
    pub fn validate(&self) -> Result<(), GanError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(GanError::InvalidParameter(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if self.restarts == 0 {
            return Err(GanError::InvalidParameter(
                "restarts must be positive".into(),
            ));
        }
        if !(self.step_decay > 0.0 && self.step_decay < 1.0) {
            return Err(GanError::InvalidParameter(format!(
                "step_decay must lie in (0, 1), got {}",
                self.step_decay
            )));
        }
        if !(self.initial_step.is_finite() && self.initial_step > 0.0) {
            return Err(GanError::InvalidParameter(format!(
                "initial_step must be positive, got {}",
                self.initial_step
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyResult {
    pub score: f64,
    pub z_star: Vec<f64>,
    pub residual: f64,
    pub discrimination: f64,
}

/// Evaluate `(1 − λ)·residual + λ·discrimination` at latent code `z`.
pub fn anomaly_score<G: Generator + ?Sized, F: FeatureMap + ?Sized>(
    x: &Image,
    z: &[f64],
    generator: &G,
    features: &F,
    lambda: f64,
    normalize: bool,
) -> Result<AnomalyResult, GanError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(GanError::InvalidParameter(format!(
            "lambda must lie in [0, 1], got {lambda}"
        )));
    }
    let gz = generator.generate(z);
    let mut residual = residual_loss(x, &gz)?;
    let fx = features.features(x);
    let mut discrimination = discrimination_loss(&fx, &features.features(&gz))?;
    if normalize {
        residual /= x.len().max(1) as f64;
        discrimination /= fx.len().max(1) as f64;
    }
    Ok(AnomalyResult {
        score: (1.0 - lambda) * residual + lambda * discrimination,
        z_star: z.to_vec(),
        residual,
        discrimination,
    })
}

/// One accepted or initial point of a restart, reported to the trace hook.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchStep {
    pub restart: usize,
    pub sweep: usize,
    pub score: f64,
    pub step: f64,
}

fn restart_start(seed: u64, restart: usize, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(restart as u64);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn search_one<G: Generator + ?Sized, F: FeatureMap + ?Sized>(
    x: &Image,
    generator: &G,
    features: &F,
    cfg: &AnoSearchConfig,
    restart: usize,
    trace: &mut dyn FnMut(SearchStep),
) -> Result<AnomalyResult, GanError> {
    let eval = |z: &[f64]| anomaly_score(x, z, generator, features, cfg.lambda, cfg.normalize);
    let mut best = eval(&restart_start(cfg.seed, restart, generator.latent_dim()))?;
    let mut step = cfg.initial_step;
    trace(SearchStep {
        restart,
        sweep: 0,
        score: best.score,
        step,
    });
    let mut z = best.z_star.clone();
    for sweep in 1..=cfg.iterations {
        let mut improved = false;
        for i in 0..z.len() {
            let origin = z[i];
            for delta in [step, -step] {
                z[i] = origin + delta;
                let probe = eval(&z)?;
                if probe.score < best.score {
                    best = probe;
                    improved = true;
                    break;
                }
                z[i] = origin;
            }
        }
        if !improved {
            step *= cfg.step_decay;
        }
        trace(SearchStep {
            restart,
            sweep,
            score: best.score,
            step,
        });
    }
    Ok(best)
}

fn pick_best(results: Vec<Result<AnomalyResult, GanError>>) -> Result<AnomalyResult, GanError> {
    let mut best: Option<AnomalyResult> = None;
    for r in results {
        let r = r?;
        // strict comparison keeps the lowest restart index on ties
        if best.as_ref().is_none_or(|b| r.score < b.score) {
            best = Some(r);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Coordinate-wise pattern search with seeded random restarts. Restarts run
/// in parallel; the reduction is order-fixed, so results do not depend on
/// thread count.
pub fn latent_search<G: Generator + ?Sized, F: FeatureMap + ?Sized>(
    x: &Image,
    generator: &G,
    features: &F,
    cfg: &AnoSearchConfig,
) -> Result<AnomalyResult, GanError> {
    cfg.validate()?;
    let results: Vec<_> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| search_one(x, generator, features, cfg, r, &mut |_| {}))
        .collect();
    pick_best(results)
}

/// Sequential variant of [`latent_search`] that reports the best score of
/// every restart after each sweep.
pub fn latent_search_traced<G: Generator + ?Sized, F: FeatureMap + ?Sized>(
    x: &Image,
    generator: &G,
    features: &F,
    cfg: &AnoSearchConfig,
    mut trace: impl FnMut(SearchStep),
) -> Result<AnomalyResult, GanError> {
    cfg.validate()?;
    let results = (0..cfg.restarts)
        .map(|r| search_one(x, generator, features, cfg, r, &mut trace))
        .collect();
    pick_best(results)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Normal,
    Abnormal,
}

pub fn threshold_classify(score: f64, threshold: f64) -> Verdict {
    if score > threshold {
        Verdict::Abnormal
    } else {
        Verdict::Normal
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GeneratorFormatError {
    #[error("generator file truncated: need {expected} bytes, have {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{0} trailing bytes after generator payload")]
    TrailingBytes(usize),
    #[error("invalid generator: {0}")]
    Invalid(String),
}

/// `G(z) = A z + b` over a `width × height` image; `A` is row-major with
/// one row per pixel.
///
/// File layout (little-endian): `u32` latent dim, `u32` width, `u32` height,
/// then `A` and `b` as `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineGenerator {
    latent_dim: usize,
    width: usize,
    height: usize,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl AffineGenerator {
    pub fn new(
        latent_dim: usize,
        width: usize,
        height: usize,
        a: Vec<f64>,
        b: Vec<f64>,
    ) -> Result<Self, GeneratorFormatError> {
        let pixels = width * height;
        if latent_dim == 0 || pixels == 0 {
            return Err(GeneratorFormatError::Invalid("zero dimension".into()));
        }
        if a.len() != pixels * latent_dim || b.len() != pixels {
            return Err(GeneratorFormatError::Invalid(format!(
                "expected {} matrix and {} offset entries, got {} and {}",
                pixels * latent_dim,
                pixels,
                a.len(),
                b.len()
            )));
        }
        if a.iter().chain(&b).any(|v| !v.is_finite()) {
            return Err(GeneratorFormatError::Invalid("non-finite parameter".into()));
        }
        Ok(AffineGenerator {
            latent_dim,
            width,
            height,
            a,
            b,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn matrix(&self) -> &[f64] {
        &self.a
    }

    pub fn offset(&self) -> &[f64] {
        &self.b
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; 12 + 8 * (self.a.len() + self.b.len())];
        LittleEndian::write_u32(&mut out[0..4], self.latent_dim as u32);
        LittleEndian::write_u32(&mut out[4..8], self.width as u32);
        LittleEndian::write_u32(&mut out[8..12], self.height as u32);
        let body = &mut out[12..];
        let (a_bytes, b_bytes) = body.split_at_mut(8 * self.a.len());
        LittleEndian::write_f64_into(&self.a, a_bytes);
        LittleEndian::write_f64_into(&self.b, b_bytes);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GeneratorFormatError> {
        if bytes.len() < 12 {
            return Err(GeneratorFormatError::Truncated {
                expected: 12,
                actual: bytes.len(),
            });
        }
        let latent = LittleEndian::read_u32(&bytes[0..4]) as usize;
        let width = LittleEndian::read_u32(&bytes[4..8]) as usize;
        let height = LittleEndian::read_u32(&bytes[8..12]) as usize;
        let pixels = width
            .checked_mul(height)
            .ok_or_else(|| GeneratorFormatError::Invalid("image too large".into()))?;
        let count = pixels
            .checked_mul(latent + 1)
            .and_then(|c| c.checked_mul(8))
            .ok_or_else(|| GeneratorFormatError::Invalid("generator too large".into()))?;
        let expected = 12 + count;
        if bytes.len() < expected {
            return Err(GeneratorFormatError::Truncated {
                expected,
                actual: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(GeneratorFormatError::TrailingBytes(bytes.len() - expected));
        }
        let mut a = vec![0.0; pixels * latent];
        let mut b = vec![0.0; pixels];
        let split = 12 + 8 * a.len();
        LittleEndian::read_f64_into(&bytes[12..split], &mut a);
        LittleEndian::read_f64_into(&bytes[split..], &mut b);
        AffineGenerator::new(latent, width, height, a, b)
    }
}

impl Generator for AffineGenerator {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn generate(&self, z: &[f64]) -> Image {
        assert_eq!(z.len(), self.latent_dim, "latent dimension mismatch");
        let data = self
            .a
            .chunks_exact(self.latent_dim)
            .zip(&self.b)
            .map(|(row, b)| row.iter().zip(z).map(|(a, z)| a * z).sum::<f64>() + b)
            .collect();
        Image::new(self.width, self.height, data).expect("generator dims are consistent")
    }
}

/// Block-mean pooling: each `cell × cell` block (partial blocks at the
/// border included) becomes one feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PooledFeatures {
    pub cell: usize,
}

impl FeatureMap for PooledFeatures {
    fn features(&self, image: &Image) -> Vec<f64> {
        let cell = self.cell.max(1);
        let mut out = Vec::new();
        for by in (0..image.height()).step_by(cell) {
            for bx in (0..image.width()).step_by(cell) {
                let (mut sum, mut n) = (0.0, 0usize);
                for y in by..(by + cell).min(image.height()) {
                    for x in bx..(bx + cell).min(image.width()) {
                        sum += image.get(x, y);
                        n += 1;
                    }
                }
                out.push(sum / n as f64);
            }
        }
        out
    }
}
