//! Class-sensitive losses over raw logits with analytic gradients.
//!
//! Every loss owns its softmax and is evaluated with max-subtraction, so
//! callers pass unnormalized logits. Values are per sample; batch reduction
//! happens in the training loop.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("class counts must all be >= 1 with at least two classes, got {0:?}")]
    InvalidCounts(Vec<u64>),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(
        "expected {expected} logits and label < {expected}, got {got} logits and label {label}"
    )]
    DimensionMismatch {
        expected: usize,
        got: usize,
        label: usize,
    },
}

/// Training-sample counts `n_j` per class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassStats {
    counts: Vec<u64>,
}

impl ClassStats {
    pub fn new(counts: Vec<u64>) -> Result<Self, LossError> {
        if counts.len() < 2 || counts.contains(&0) {
            return Err(LossError::InvalidCounts(counts));
        }
        Ok(Self { counts })
    }

    /// Tallies class indices; `num_classes` fixes K even if a class is absent
    /// (which then fails validation).
    pub fn from_labels(labels: &[usize], num_classes: usize) -> Result<Self, LossError> {
        let mut counts = vec![0u64; num_classes];
        for &l in labels {
            if l >= num_classes {
                return Err(LossError::InvalidParameter(format!(
                    "label {l} out of range for {num_classes} classes"
                )));
            }
            counts[l] += 1;
        }
        Self::new(counts)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }
}

/// Loss value and `∂loss/∂logit_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEvaluation {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Where the LDAM expanding factor is applied to the logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMode {
    /// `u = z / s`, as the loss is usually printed.
    #[default]
    Divide,
    /// `u = s · z`.
    Multiply,
}

impl ScalingMode {
    fn factor(self, s: f64) -> f64 {
        match self {
            ScalingMode::Divide => 1.0 / s,
            ScalingMode::Multiply => s,
        }
    }
}

/// Whether class-balanced weights are rescaled to sum to K.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CbNormalization {
    #[default]
    Normalized,
    Raw,
}

/// Numerically stable `log softmax`.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let (arg, max) =
        logits
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, z)| {
                if z > best.1 {
                    (i, z)
                } else {
                    best
                }
            });
    // ln_1p over the non-maximal terms keeps log p_max accurate when it is ≈ 0.
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, &z)| (z - max).exp())
        .sum();
    let log_norm = rest.ln_1p();
    logits.iter().map(|&z| (z - max) - log_norm).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

fn check(logits: &[f64], label: usize) {
    assert!(logits.len() >= 2, "need at least two logits");
    assert!(label < logits.len(), "label {label} out of range");
}

/// `−log softmax(z)[y]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> LossEvaluation {
    check(logits, label);
    let logp = log_softmax(logits);
    let mut grad: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    grad[label] -= 1.0;
    LossEvaluation {
        value: -logp[label],
        grad,
    }
}

/// Per-class margins `Δ_j = C / n_j^{1/4}` with `C` chosen so the rarest
/// class receives exactly `m`.
pub fn ldam_margins(stats: &ClassStats, m: f64) -> Vec<f64> {
    assert!(m >= 0.0 && m.is_finite(), "margin constant must be >= 0");
    let raw: Vec<f64> = stats
        .counts()
        .iter()
        .map(|&n| (n as f64).powf(-0.25))
        .collect();
    let max = raw.iter().copied().fold(0.0, f64::max);
    raw.iter().map(|r| m * r / max).collect()
}

/// LDAM loss: cross-entropy on `u` where the true-class logit is reduced by
/// its margin and all logits are scaled by `s` per `mode`.
pub fn ldam_loss(
    logits: &[f64],
    label: usize,
    margins: &[f64],
    s: f64,
    mode: ScalingMode,
) -> LossEvaluation {
    check(logits, label);
    assert_eq!(margins.len(), logits.len(), "one margin per class");
    assert!(s > 0.0, "expanding factor must be positive");
    let c = mode.factor(s);
    let mut u: Vec<f64> = logits.iter().map(|&z| c * z).collect();
    u[label] = c * (logits[label] - margins[label]);
    let mut eval = cross_entropy(&u, label);
    for g in &mut eval.grad {
        *g *= c;
    }
    eval
}

/// `−(1 − p_t)^γ · log p_t` with `p_t = softmax(z)[y]`.
pub fn focal_loss(logits: &[f64], label: usize, gamma: f64) -> LossEvaluation {
    check(logits, label);
    assert!(gamma >= 0.0, "gamma must be nonnegative");
    let logp = log_softmax(logits);
    let p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    let log_pt = logp[label];
    let pt = p[label];
    // 1 − p_t summed directly to avoid cancellation when p_t ≈ 1.
    let q: f64 = p
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label)
        .map(|(_, &v)| v)
        .sum();
    let q_gamma = q.powf(gamma);
    let value = -q_gamma * log_pt;

    if q == 0.0 {
        return LossEvaluation {
            value: value.max(0.0),
            grad: vec![0.0; logits.len()],
        };
    }
    // dL/dz_i = (δ_iy − p_i) · B with B = γ q^{γ−1} p_t log p_t − q^γ.
    // The i = y term is q·B; for i ≠ y it is −(p_i / q)·(q·B).
    let qb = gamma * q_gamma * pt * log_pt - q_gamma * q;
    let grad = p
        .iter()
        .enumerate()
        .map(|(i, &pi)| if i == label { qb } else { -(pi / q) * qb })
        .collect();
    LossEvaluation { value, grad }
}

/// Effective number of samples `(1 − βⁿ)/(1 − β)`, i.e. `Σ_{i<n} βⁱ`.
pub fn effective_number(n: u64, beta: f64) -> f64 {
    assert!(n >= 1, "n must be positive");
    assert!((0.0..1.0).contains(&beta), "beta must lie in [0, 1)");
    if n == 1 || beta == 0.0 {
        return 1.0;
    }
    // expm1/ln_1p keep precision as β → 1.
    let one_minus = 1.0 - beta;
    let log_beta = (-one_minus).ln_1p();
    -(n as f64 * log_beta).exp_m1() / one_minus
}

/// Class-balanced weights `(1 − β)/(1 − β^{n_j})`, optionally rescaled to
/// sum to K.
pub fn cb_weights(stats: &ClassStats, beta: f64, normalization: CbNormalization) -> Vec<f64> {
    let raw: Vec<f64> = stats
        .counts()
        .iter()
        .map(|&n| 1.0 / effective_number(n, beta))
        .collect();
    match normalization {
        CbNormalization::Raw => raw,
        CbNormalization::Normalized => {
            let k = raw.len() as f64;
            let sum: f64 = raw.iter().sum();
            raw.iter().map(|w| w * k / sum).collect()
        }
    }
}

pub fn weighted_loss(base: LossEvaluation, weight: f64) -> LossEvaluation {
    assert!(weight > 0.0, "weight must be positive");
    LossEvaluation {
        value: base.value * weight,
        grad: base.grad.into_iter().map(|g| g * weight).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    Ldam,
    Focal,
    CbCe,
    CbLdam,
    CbFocal,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::Ce,
        LossKind::Ldam,
        LossKind::Focal,
        LossKind::CbCe,
        LossKind::CbLdam,
        LossKind::CbFocal,
    ];

    fn uses_ldam(self) -> bool {
        matches!(self, LossKind::Ldam | LossKind::CbLdam)
    }

    fn uses_focal(self) -> bool {
        matches!(self, LossKind::Focal | LossKind::CbFocal)
    }

    fn uses_cb(self) -> bool {
        matches!(self, LossKind::CbCe | LossKind::CbLdam | LossKind::CbFocal)
    }
}

pub const DEFAULT_LDAM_M: f64 = 0.3;
pub const DEFAULT_LDAM_S: f64 = 50.0;
pub const DEFAULT_FOCAL_GAMMA: f64 = 0.02;
pub const DEFAULT_CB_BETA: f64 = 0.999;

/// Serializable loss selection. Parameters left out take their defaults;
/// parameters that the kind does not use are rejected by [`make_loss`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub kind: LossKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaling_mode: Option<ScalingMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cb_normalization: Option<CbNormalization>,
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            m: None,
            s: None,
            scaling_mode: None,
            gamma: None,
            beta: None,
            cb_normalization: None,
        }
    }

    pub fn ldam(kind: LossKind, m: f64, s: f64, mode: ScalingMode) -> Self {
        Self {
            m: Some(m),
            s: Some(s),
            scaling_mode: Some(mode),
            ..Self::new(kind)
        }
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = Some(beta);
        self
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = Some(gamma);
        self
    }
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec::ldam(
            LossKind::CbLdam,
            DEFAULT_LDAM_M,
            DEFAULT_LDAM_S,
            ScalingMode::Divide,
        )
        .with_beta(DEFAULT_CB_BETA)
    }
}

/// Per-sample objective consumed by the trainer.
pub trait SampleLoss: Sync {
    fn num_classes(&self) -> usize;

    fn evaluate(&self, logits: &[f64], label: usize) -> Result<LossEvaluation, LossError>;
}

#[derive(Debug, Clone, PartialEq)]
enum Base {
    Ce,
    Ldam {
        margins: Vec<f64>,
        s: f64,
        mode: ScalingMode,
    },
    Focal {
        gamma: f64,
    },
}

/// A resolved, immutable loss function.
#[derive(Debug, Clone, PartialEq)]
pub struct LossFn {
    kind: LossKind,
    base: Base,
    class_weights: Option<Vec<f64>>,
    num_classes: usize,
}

impl LossFn {
    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn class_weights(&self) -> Option<&[f64]> {
        self.class_weights.as_deref()
    }

    pub fn margins(&self) -> Option<&[f64]> {
        match &self.base {
            Base::Ldam { margins, .. } => Some(margins),
            _ => None,
        }
    }
}

impl SampleLoss for LossFn {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn evaluate(&self, logits: &[f64], label: usize) -> Result<LossEvaluation, LossError> {
        if logits.len() != self.num_classes || label >= self.num_classes {
            return Err(LossError::DimensionMismatch {
                expected: self.num_classes,
                got: logits.len(),
                label,
            });
        }
        let base = match &self.base {
            Base::Ce => cross_entropy(logits, label),
            Base::Ldam { margins, s, mode } => ldam_loss(logits, label, margins, *s, *mode),
            Base::Focal { gamma } => focal_loss(logits, label, *gamma),
        };
        Ok(match &self.class_weights {
            Some(w) => weighted_loss(base, w[label]),
            None => base,
        })
    }
}

fn positive(name: &str, v: f64) -> Result<f64, LossError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(LossError::InvalidParameter(format!(
            "{name} = {v} must be > 0"
        )))
    }
}

/// Resolves a [`LossSpec`] against training-set class counts.
pub fn make_loss(spec: &LossSpec, stats: &ClassStats) -> Result<LossFn, LossError> {
    let kind = spec.kind;
    let stray = |name: &str, present: bool, used: bool| -> Result<(), LossError> {
        if present && !used {
            Err(LossError::ConfigMismatch(format!(
                "{name} is not used by loss kind {kind:?}"
            )))
        } else {
            Ok(())
        }
    };
    stray("m", spec.m.is_some(), kind.uses_ldam())?;
    stray("s", spec.s.is_some(), kind.uses_ldam())?;
    stray(
        "scaling_mode",
        spec.scaling_mode.is_some(),
        kind.uses_ldam(),
    )?;
    stray("gamma", spec.gamma.is_some(), kind.uses_focal())?;
    stray("beta", spec.beta.is_some(), kind.uses_cb())?;
    stray(
        "cb_normalization",
        spec.cb_normalization.is_some(),
        kind.uses_cb(),
    )?;

    let base = if kind.uses_ldam() {
        let m = spec.m.unwrap_or(DEFAULT_LDAM_M);
        if !(m >= 0.0 && m.is_finite()) {
            return Err(LossError::InvalidParameter(format!("m = {m} must be >= 0")));
        }
        Base::Ldam {
            margins: ldam_margins(stats, m),
            s: positive("s", spec.s.unwrap_or(DEFAULT_LDAM_S))?,
            mode: spec.scaling_mode.unwrap_or_default(),
        }
    } else if kind.uses_focal() {
        let gamma = spec.gamma.unwrap_or(DEFAULT_FOCAL_GAMMA);
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(LossError::InvalidParameter(format!(
                "gamma = {gamma} must be >= 0"
            )));
        }
        Base::Focal { gamma }
    } else {
        Base::Ce
    };

    let class_weights = if kind.uses_cb() {
        let beta = spec.beta.unwrap_or(DEFAULT_CB_BETA);
        if !(0.0..1.0).contains(&beta) {
            return Err(LossError::InvalidParameter(format!(
                "beta = {beta} must lie in [0, 1)"
            )));
        }
        Some(cb_weights(
            stats,
            beta,
            spec.cb_normalization.unwrap_or_default(),
        ))
    } else {
        None
    };

    Ok(LossFn {
        kind,
        base,
        class_weights,
        num_classes: stats.num_classes(),
    })
}
