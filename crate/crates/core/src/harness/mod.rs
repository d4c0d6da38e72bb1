//! Desk-scale classifier harness: a linear softmax model over downsampled
//! slices, trained with any [`SampleLoss`], plus fold evaluation,
//! cross-validation, grid search and patient-level voting.

mod cv;
mod synthetic;

pub use cv::{
    cross_validate, format_significant, grid_search, CrossValResult, CvConfig, CvSummary,
    GridResult, SplitMode,
};
pub use synthetic::{synth_slice_dataset, LabeledSlice, SyntheticSpec, LESION_BANDS};

use crate::image::Image;
use crate::losses::{ClassStats, LossError, SampleLoss};
use crate::metrics::{confusion, MetricReport, MetricsError, SplitError};
use crate::qc::resize_slice;
use byteorder::{ByteOrder, LittleEndian};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FEATURE_SIDE: usize = 16;
pub const FEATURE_DIM: usize = FEATURE_SIDE * FEATURE_SIDE + 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HarnessError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("input is empty")]
    EmptyInput,
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("class {class} out of range for {k} classes")]
    ClassOutOfRange { class: usize, k: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelFormatError {
    #[error("model file truncated: need {expected} bytes, have {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{0} trailing bytes after model payload")]
    TrailingBytes(usize),
    #[error("invalid model: {0}")]
    Invalid(String),
}

/// Downsample to 16×16 (bilinear, corner-aligned), flatten row-major and
/// append a constant bias feature of 1.
pub fn featurize(slice: &Image) -> Vec<f64> {
    let mut fv = resize_slice(slice, FEATURE_SIDE).into_vec();
    fv.push(1.0);
    fv
}

/// One training or evaluation sample. `group` identifies the patient the
/// slice came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: usize,
    pub group: usize,
}

impl Example {
    pub fn new(features: Vec<f64>, label: usize) -> Self {
        Example {
            features,
            label,
            group: 0,
        }
    }
}

/// Row-major `K × dim` weights; `dim` includes the bias feature.
///
/// File layout (little-endian): `u32` K, `u32` dim, then `f64` weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    num_classes: usize,
    dim: usize,
    weights: Vec<f64>,
}

impl LinearModel {
    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        LinearModel {
            num_classes,
            dim,
            weights: vec![0.0; num_classes * dim],
        }
    }

    pub fn from_weights(num_classes: usize, dim: usize, weights: Vec<f64>) -> Option<Self> {
        (num_classes > 0
            && dim > 0
            && weights.len() == num_classes * dim
            && weights.iter().all(|w| w.is_finite()))
        .then_some(LinearModel {
            num_classes,
            dim,
            weights,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn logits(&self, fv: &[f64]) -> Result<Vec<f64>, HarnessError> {
        if fv.len() != self.dim {
            return Err(HarnessError::DimensionMismatch {
                expected: self.dim,
                got: fv.len(),
            });
        }
        Ok(self
            .weights
            .chunks_exact(self.dim)
            .map(|row| row.iter().zip(fv).map(|(w, x)| w * x).sum())
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; 8 + 8 * self.weights.len()];
        LittleEndian::write_u32(&mut out[0..4], self.num_classes as u32);
        LittleEndian::write_u32(&mut out[4..8], self.dim as u32);
        LittleEndian::write_f64_into(&self.weights, &mut out[8..]);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelFormatError> {
        if bytes.len() < 8 {
            return Err(ModelFormatError::Truncated {
                expected: 8,
                actual: bytes.len(),
            });
        }
        let k = LittleEndian::read_u32(&bytes[0..4]) as usize;
        let dim = LittleEndian::read_u32(&bytes[4..8]) as usize;
        let expected = k
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(8))
            .and_then(|n| n.checked_add(8))
            .ok_or_else(|| ModelFormatError::Invalid("model too large".into()))?;
        if bytes.len() < expected {
            return Err(ModelFormatError::Truncated {
                expected,
                actual: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(ModelFormatError::TrailingBytes(bytes.len() - expected));
        }
        let mut weights = vec![0.0; k * dim];
        LittleEndian::read_f64_into(&bytes[8..], &mut weights);
        LinearModel::from_weights(k, dim, weights)
            .ok_or_else(|| ModelFormatError::Invalid("zero dimension or non-finite weight".into()))
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Logits and the predicted class; ties go to the lowest index.
pub fn predict(model: &LinearModel, fv: &[f64]) -> Result<(Vec<f64>, usize), HarnessError> {
    let logits = model.logits(fv)?;
    let class = argmax(&logits);
    Ok((logits, class))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.0004,
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 0.001,
            epochs: 120,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted: it leaves the model untouched.
    pub fn validate(&self) -> Result<(), HarnessError> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(HarnessError::InvalidConfig(format!(
                "learning_rate must be nonnegative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(HarnessError::InvalidConfig(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(HarnessError::InvalidConfig(
                "batch_size must be at least 1".into(),
            ));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(HarnessError::InvalidConfig(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Trained model plus the mean per-sample loss of every epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: LinearModel,
    pub epoch_losses: Vec<f64>,
}

fn check_training_set(
    data: &[Example],
    stats: &ClassStats,
    k: usize,
    dim: usize,
) -> Result<(), HarnessError> {
    if data.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    if stats.num_classes() != k {
        return Err(HarnessError::ConfigMismatch(format!(
            "class stats have {} classes, loss expects {k}",
            stats.num_classes()
        )));
    }
    let mut tally = vec![0u64; k];
    for ex in data {
        if ex.label >= k {
            return Err(HarnessError::ClassOutOfRange { class: ex.label, k });
        }
        if ex.features.len() != dim {
            return Err(HarnessError::DimensionMismatch {
                expected: dim,
                got: ex.features.len(),
            });
        }
        tally[ex.label] += 1;
    }
    if tally != stats.counts() {
        return Err(HarnessError::ConfigMismatch(format!(
            "class stats {:?} do not match the data's label counts {:?}",
            stats.counts(),
            tally
        )));
    }
    Ok(())
}

/// Mini-batch gradient descent with momentum and L2 weight decay, starting
/// from all-zero weights.
pub fn train<L: SampleLoss + ?Sized>(
    data: &[Example],
    stats: &ClassStats,
    loss: &L,
    cfg: &TrainConfig,
) -> Result<LinearModel, HarnessError> {
    Ok(train_with_history(data, stats, loss, cfg)?.model)
}

pub fn train_with_history<L: SampleLoss + ?Sized>(
    data: &[Example],
    stats: &ClassStats,
    loss: &L,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, HarnessError> {
    let dim = data
        .first()
        .ok_or(HarnessError::EmptyDataset)?
        .features
        .len();
    train_from(
        LinearModel::zeros(loss.num_classes(), dim),
        data,
        stats,
        loss,
        cfg,
    )
}

/// Like [`train_with_history`] but continues from `initial`.
///
/// Per step: `v ← μ v − lr (∇ + wd W)`, `W ← W + v`, where `∇` is the mean
/// gradient over the batch. Batches follow a fresh seeded shuffle each epoch.
pub fn train_from<L: SampleLoss + ?Sized>(
    initial: LinearModel,
    data: &[Example],
    stats: &ClassStats,
    loss: &L,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    let (k, dim) = (initial.num_classes, initial.dim);
    if loss.num_classes() != k {
        return Err(HarnessError::ConfigMismatch(format!(
            "model has {k} classes, loss expects {}",
            loss.num_classes()
        )));
    }
    check_training_set(data, stats, k, dim)?;

    let mut model = initial;
    let mut velocity = vec![0.0; model.weights.len()];
    let mut grad = vec![0.0; model.weights.len()];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grad.fill(0.0);
            for &i in batch {
                let ex = &data[i];
                let logits = model.logits(&ex.features)?;
                let eval = loss.evaluate(&logits, ex.label)?;
                epoch_sum += eval.value;
                for (c, g) in eval.grad.iter().enumerate() {
                    if *g == 0.0 {
                        continue;
                    }
                    let row = &mut grad[c * dim..(c + 1) * dim];
                    for (acc, x) in row.iter_mut().zip(&ex.features) {
                        *acc += g * x;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for ((w, v), g) in model.weights.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = cfg.momentum * *v - cfg.learning_rate * (g * scale + cfg.weight_decay * *w);
                *w += *v;
            }
        }
        epoch_losses.push(epoch_sum / data.len() as f64);
    }
    Ok(TrainOutcome {
        model,
        epoch_losses,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientDiagnosis {
    pub per_slice_predictions: Vec<usize>,
    pub vote_counts: Vec<usize>,
    pub final_class: usize,
}

/// Majority vote over per-slice classes; a tie goes to the highest
/// (most severe) tied class.
pub fn diagnose(per_slice: &[usize], num_classes: usize) -> Result<PatientDiagnosis, HarnessError> {
    if per_slice.is_empty() {
        return Err(HarnessError::EmptyInput);
    }
    let mut votes = vec![0usize; num_classes];
    for &c in per_slice {
        *votes.get_mut(c).ok_or(HarnessError::ClassOutOfRange {
            class: c,
            k: num_classes,
        })? += 1;
    }
    let mut final_class = 0;
    for (c, &v) in votes.iter().enumerate() {
        if v >= votes[final_class] {
            final_class = c;
        }
    }
    Ok(PatientDiagnosis {
        per_slice_predictions: per_slice.to_vec(),
        vote_counts: votes,
        final_class,
    })
}

/// Predict every sample of a fold and summarize against its labels.
pub fn evaluate_fold(model: &LinearModel, fold: &[Example]) -> Result<MetricReport, HarnessError> {
    if fold.is_empty() {
        return Err(HarnessError::EmptyInput);
    }
    let mut preds = Vec::with_capacity(fold.len());
    for ex in fold {
        preds.push(predict(model, &ex.features)?.1);
    }
    let labels: Vec<usize> = fold.iter().map(|e| e.label).collect();
    let cm = confusion(&preds, &labels, model.num_classes)?;
    Ok(MetricReport::from_confusion(&cm))
}

#[cfg(test)]
mod tests;
