//! Stratified cross-validation and the (m, s) grid search over it.

use super::{evaluate_fold, train, Example, HarnessError, TrainConfig};
use crate::losses::{make_loss, ClassStats, LossKind, LossSpec, ScalingMode, DEFAULT_CB_BETA};
use crate::metrics::{crossval_split, FoldAssignment, MacroMetrics, MetricReport};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Every slice is assigned to a fold independently.
    #[default]
    Slice,
    /// All slices of a patient share a fold.
    Patient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub k: usize,
    pub seed: u64,
    pub split_mode: SplitMode,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            k: 4,
            seed: 0,
            split_mode: SplitMode::Slice,
        }
    }
}

/// Mean and sample standard deviation of each macro metric across folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub mean: MacroMetrics,
    pub sd: MacroMetrics,
}

impl CvSummary {
    fn from_reports(reports: &[MetricReport]) -> Self {
        let rows: Vec<[f64; 6]> = reports.iter().map(|r| r.macro_avg.values()).collect();
        let n = rows.len() as f64;
        let mut mean = [0.0; 6];
        let mut sd = [0.0; 6];
        for j in 0..6 {
            mean[j] = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            if rows.len() > 1 {
                let ss: f64 = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum();
                sd[j] = (ss / (n - 1.0)).sqrt();
            }
        }
        CvSummary {
            mean: MacroMetrics::from_values(mean),
            sd: MacroMetrics::from_values(sd),
        }
    }

    /// Header plus `mean` and `sd` rows.
    pub fn to_csv(&self) -> String {
        format!(
            "stat,{}\nmean,{}\nsd,{}\n",
            MacroMetrics::CSV_HEADER,
            self.mean.to_csv_row(),
            self.sd.to_csv_row()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValResult {
    pub split_mode: SplitMode,
    pub folds: Vec<MetricReport>,
    pub summary: CvSummary,
}

fn assign_folds(data: &[Example], cv: &CvConfig) -> Result<FoldAssignment, HarnessError> {
    let labels: Vec<usize> = data.iter().map(|e| e.label).collect();
    match cv.split_mode {
        SplitMode::Slice => Ok(crossval_split(&labels, cv.k, cv.seed)?),
        SplitMode::Patient => {
            let mut patients: BTreeMap<usize, (usize, Vec<usize>)> = BTreeMap::new();
            for (i, ex) in data.iter().enumerate() {
                let entry = patients.entry(ex.group).or_insert((ex.label, Vec::new()));
                if entry.0 != ex.label {
                    return Err(HarnessError::ConfigMismatch(format!(
                        "patient {} has slices labelled {} and {}",
                        ex.group, entry.0, ex.label
                    )));
                }
                entry.1.push(i);
            }
            let groups: Vec<_> = patients.into_values().collect();
            let patient_labels: Vec<usize> = groups.iter().map(|g| g.0).collect();
            let by_patient = crossval_split(&patient_labels, cv.k, cv.seed)?;
            let folds = by_patient
                .folds()
                .iter()
                .map(|fold| {
                    let mut idx: Vec<usize> = fold
                        .iter()
                        .flat_map(|&p| groups[p].1.iter().copied())
                        .collect();
                    idx.sort_unstable();
                    idx
                })
                .collect();
            Ok(FoldAssignment::from_folds(folds))
        }
    }
}

#[cfg(test)]
pub(super) fn assign_folds_for_test(data: &[Example], cv: &CvConfig) -> FoldAssignment {
    assign_folds(data, cv).unwrap()
}

/// Train on k−1 folds, evaluate on the held-out fold, for every fold. Loss
/// statistics come from each training split. Folds run in parallel; fold
/// `f` trains with seed `train.seed + f`.
pub fn cross_validate(
    data: &[Example],
    num_classes: usize,
    loss: &LossSpec,
    train_cfg: &TrainConfig,
    cv: &CvConfig,
) -> Result<CrossValResult, HarnessError> {
    if data.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    train_cfg.validate()?;
    let folds = assign_folds(data, cv)?;
    let reports: Vec<Result<MetricReport, HarnessError>> = (0..folds.k())
        .into_par_iter()
        .map(|f| {
            let training: Vec<Example> =
                folds.training(f).iter().map(|&i| data[i].clone()).collect();
            let held_out: Vec<Example> = folds
                .validation(f)
                .iter()
                .map(|&i| data[i].clone())
                .collect();
            let labels: Vec<usize> = training.iter().map(|e| e.label).collect();
            let stats = ClassStats::from_labels(&labels, num_classes)?;
            let loss_fn = make_loss(loss, &stats)?;
            let cfg = TrainConfig {
                seed: train_cfg.seed.wrapping_add(f as u64),
                ..train_cfg.clone()
            };
            let model = train(&training, &stats, &loss_fn, &cfg)?;
            evaluate_fold(&model, &held_out)
        })
        .collect();
    let reports = reports.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(CrossValResult {
        split_mode: cv.split_mode,
        summary: CvSummary::from_reports(&reports),
        folds: reports,
    })
}

/// Mean validation macro MCC for every `(m, s)` pair; rows follow `ms`,
/// columns follow `ss`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub ms: Vec<f64>,
    pub ss: Vec<f64>,
    pub cells: Vec<Vec<f64>>,
}

impl GridResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("m\\s");
        for s in &self.ss {
            out.push(',');
            out.push_str(&format_significant(*s, 6));
        }
        out.push('\n');
        for (m, row) in self.ms.iter().zip(&self.cells) {
            out.push_str(&format_significant(*m, 6));
            for v in row {
                out.push(',');
                out.push_str(&format_significant(*v, 6));
            }
            out.push('\n');
        }
        out
    }
}

/// Sweep the LDAM margin scale `m` and logit scale `s` of a class-balanced
/// LDAM loss (β = 0.999), cross-validating every cell.
pub fn grid_search(
    data: &[Example],
    num_classes: usize,
    ms: &[f64],
    ss: &[f64],
    scaling: ScalingMode,
    train_cfg: &TrainConfig,
    cv: &CvConfig,
) -> Result<GridResult, HarnessError> {
    if ms.is_empty() || ss.is_empty() {
        return Err(HarnessError::InvalidConfig(
            "grid must have at least one m and one s".into(),
        ));
    }
    let pairs: Vec<(f64, f64)> = ms
        .iter()
        .flat_map(|&m| ss.iter().map(move |&s| (m, s)))
        .collect();
    let scores: Vec<Result<f64, HarnessError>> = pairs
        .par_iter()
        .map(|&(m, s)| {
            let spec = LossSpec::ldam(LossKind::CbLdam, m, s, scaling).with_beta(DEFAULT_CB_BETA);
            let res = cross_validate(data, num_classes, &spec, train_cfg, cv)?;
            Ok(res.summary.mean.mcc)
        })
        .collect();
    let scores = scores.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(GridResult {
        ms: ms.to_vec(),
        ss: ss.to_vec(),
        cells: scores.chunks(ss.len()).map(<[f64]>::to_vec).collect(),
    })
}

/// `%g`-style formatting with `digits` significant digits.
pub fn format_significant(v: f64, digits: usize) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if exp < -4 || exp >= digits as i32 {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{}{:02}", trim(mantissa), sign, exp.abs())
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim(&format!("{:.*}", decimals, v))
    }
}
