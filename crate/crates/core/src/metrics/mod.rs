//! Imbalance-aware classification metrics and stratified fold assignment.
//!
//! All per-class quantities are one-vs-rest; macro values are unweighted
//! means over classes. Zero denominators yield 0.

mod folds;

pub use folds::{crossval_split, FoldAssignment, SplitError};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("{preds} predictions but {labels} labels")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("class {class} out of range for {k} classes")]
    ClassOutOfRange { class: usize, k: usize },
}

/// K×K counts, rows = true class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    cells: Vec<u64>,
    n: u64,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        Self {
            k,
            cells: vec![0; k * k],
            n: 0,
        }
    }

    /// Builds a matrix from rows of counts; panics if not square.
    pub fn from_rows<R: AsRef<[u64]>>(rows: &[R]) -> Self {
        let k = rows.len();
        let mut cm = Self::zeros(k);
        for (t, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            assert_eq!(row.len(), k, "confusion matrix must be square");
            for (p, &c) in row.iter().enumerate() {
                cm.cells[t * k + p] = c;
                cm.n += c;
            }
        }
        cm
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn total(&self) -> u64 {
        self.n
    }

    pub fn cell(&self, truth: usize, pred: usize) -> u64 {
        self.cells[truth * self.k + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.cells[truth * self.k + pred] += 1;
        self.n += 1;
    }

    /// Ground-truth totals `A_i`.
    pub fn row_sums(&self) -> Vec<u64> {
        (0..self.k)
            .map(|t| (0..self.k).map(|p| self.cell(t, p)).sum())
            .collect()
    }

    /// Prediction totals `B_i`.
    pub fn column_sums(&self) -> Vec<u64> {
        (0..self.k)
            .map(|p| (0..self.k).map(|t| self.cell(t, p)).sum())
            .collect()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.cell(i, i)).sum()
    }
}

pub fn confusion(
    preds: &[usize],
    labels: &[usize],
    k: usize,
) -> Result<ConfusionMatrix, MetricsError> {
    if preds.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            labels: labels.len(),
        });
    }
    let mut cm = ConfusionMatrix::zeros(k);
    for (&p, &t) in preds.iter().zip(labels) {
        if let Some(&class) = [p, t].iter().find(|&&c| c >= k) {
            return Err(MetricsError::ClassOutOfRange { class, k });
        }
        cm.add(t, p);
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinaryCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

pub fn one_vs_rest(cm: &ConfusionMatrix, class: usize) -> BinaryCounts {
    assert!(class < cm.k, "class out of range");
    let tp = cm.cell(class, class);
    let fp = (0..cm.k).map(|t| cm.cell(t, class)).sum::<u64>() - tp;
    let fn_ = (0..cm.k).map(|p| cm.cell(class, p)).sum::<u64>() - tp;
    BinaryCounts {
        tp,
        fp,
        fn_,
        tn: cm.n - tp - fp - fn_,
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Per-class values with their unweighted mean.
#[derive(Debug, Clone, PartialEq)]
pub struct PerClass {
    pub per_class: Vec<f64>,
    pub macro_avg: f64,
}

impl PerClass {
    fn from_fn(k: usize, f: impl Fn(usize) -> f64) -> Self {
        let per_class: Vec<f64> = (0..k).map(f).collect();
        let macro_avg = if k == 0 {
            0.0
        } else {
            per_class.iter().sum::<f64>() / k as f64
        };
        Self {
            per_class,
            macro_avg,
        }
    }
}

pub fn binary_mcc(c: BinaryCounts) -> f64 {
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if den == 0.0 {
        return 0.0;
    }
    (tp * tn - fp * fn_) / den.sqrt()
}

pub fn mcc(cm: &ConfusionMatrix) -> PerClass {
    PerClass::from_fn(cm.k, |c| binary_mcc(one_vs_rest(cm, c)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionRecallF1 {
    pub precision: PerClass,
    pub recall: PerClass,
    pub f1: PerClass,
}

pub fn precision_recall_f1(cm: &ConfusionMatrix) -> PrecisionRecallF1 {
    let counts: Vec<BinaryCounts> = (0..cm.k).map(|c| one_vs_rest(cm, c)).collect();
    let precision = |c: usize| ratio(counts[c].tp as f64, (counts[c].tp + counts[c].fp) as f64);
    let recall = |c: usize| ratio(counts[c].tp as f64, (counts[c].tp + counts[c].fn_) as f64);
    PrecisionRecallF1 {
        precision: PerClass::from_fn(cm.k, precision),
        recall: PerClass::from_fn(cm.k, recall),
        f1: PerClass::from_fn(cm.k, |c| {
            let (p, r) = (precision(c), recall(c));
            ratio(2.0 * p * r, p + r)
        }),
    }
}

/// Per-class `(TPR + TNR) / 2`.
pub fn balanced_accuracy_per_class(cm: &ConfusionMatrix) -> PerClass {
    PerClass::from_fn(cm.k, |c| {
        let b = one_vs_rest(cm, c);
        let tpr = ratio(b.tp as f64, (b.tp + b.fn_) as f64);
        let tnr = ratio(b.tn as f64, (b.tn + b.fp) as f64);
        0.5 * (tpr + tnr)
    })
}

pub fn balanced_accuracy(cm: &ConfusionMatrix) -> f64 {
    balanced_accuracy_per_class(cm).macro_avg
}

/// Chance-agreement term `Σ A_i B_i / n²`.
pub fn chance_agreement(cm: &ConfusionMatrix) -> f64 {
    if cm.n == 0 {
        return 0.0;
    }
    let n = cm.n as f64;
    cm.row_sums()
        .iter()
        .zip(cm.column_sums())
        .map(|(&a, b)| a as f64 * b as f64)
        .sum::<f64>()
        / (n * n)
}

/// Cohen's kappa `(p₀ − p_e)/(1 − p_e)`; 0 for an empty matrix or when
/// `p_e = 1`.
pub fn kappa(cm: &ConfusionMatrix) -> f64 {
    if cm.n == 0 {
        return 0.0;
    }
    let p0 = cm.trace() as f64 / cm.n as f64;
    let pe = chance_agreement(cm);
    if pe >= 1.0 {
        return 0.0;
    }
    (p0 - pe) / (1.0 - pe)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub mcc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub balanced_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub mcc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub balanced_accuracy: f64,
    pub kappa: f64,
}

impl MacroMetrics {
    pub const CSV_HEADER: &'static str = "mcc,precision,recall,f1,balanced_accuracy,kappa";
    pub const NAMES: [&'static str; 6] = [
        "mcc",
        "precision",
        "recall",
        "f1",
        "balanced_accuracy",
        "kappa",
    ];

    /// Inverse of [`MacroMetrics::values`].
    pub fn from_values(v: [f64; 6]) -> Self {
        MacroMetrics {
            mcc: v[0],
            precision: v[1],
            recall: v[2],
            f1: v[3],
            balanced_accuracy: v[4],
            kappa: v[5],
        }
    }

    pub fn values(&self) -> [f64; 6] {
        [
            self.mcc,
            self.precision,
            self.recall,
            self.f1,
            self.balanced_accuracy,
            self.kappa,
        ]
    }

    pub fn to_csv_row(&self) -> String {
        self.values()
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: u64,
    pub per_class: Vec<ClassMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: MacroMetrics,
    pub confusion: Vec<Vec<u64>>,
}

impl MetricReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        let m = mcc(cm);
        let prf = precision_recall_f1(cm);
        let ba = balanced_accuracy_per_class(cm);
        let per_class = (0..cm.k)
            .map(|c| ClassMetrics {
                mcc: m.per_class[c],
                precision: prf.precision.per_class[c],
                recall: prf.recall.per_class[c],
                f1: prf.f1.per_class[c],
                balanced_accuracy: ba.per_class[c],
            })
            .collect();
        Self {
            n: cm.n,
            per_class,
            macro_avg: MacroMetrics {
                mcc: m.macro_avg,
                precision: prf.precision.macro_avg,
                recall: prf.recall.macro_avg,
                f1: prf.f1.macro_avg,
                balanced_accuracy: ba.macro_avg,
                kappa: kappa(cm),
            },
            confusion: (0..cm.k)
                .map(|t| (0..cm.k).map(|p| cm.cell(t, p)).collect())
                .collect(),
        }
    }
}
