//! Volume standardization: trim to the lung range, resample to a fixed slice
//! count, repair dark slices, min-max normalize and resize.

mod stack;

pub use stack::{SliceStack, StackFormatError};

use crate::image::Image;
use crate::volume_io::VoxelVolume;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Upper bound on detect/repair passes.
pub const MAX_REPAIR_PASSES: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QcError {
    #[error("trimming {fraction} of {nz} slices leaves nothing")]
    EmptyResult { nz: usize, fraction: f64 },
    #[error("slice {0} has no usable neighbour to repair from")]
    NoValidNeighbor(usize),
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("slice index {idx} out of range for {nz} slices")]
    IndexOutOfRange { idx: usize, nz: usize },
}

/// How a dark slice is brought back to its neighbours' brightness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepairMode {
    /// Scale the slice so its mean matches the neighbour mean.
    #[default]
    Rescale,
    /// Replace the slice with the pixelwise mean of its neighbours.
    Replace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub trim_fraction: f64,
    pub target_slices: usize,
    pub resize_to: usize,
    pub window: usize,
    pub darkness_ratio: f64,
    pub repair_mode: RepairMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            trim_fraction: 0.25,
            target_slices: 10,
            resize_to: 224,
            window: 3,
            darkness_ratio: 0.7,
            repair_mode: RepairMode::Rescale,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), QcError> {
        let bad = |msg: String| Err(QcError::InvalidConfig(msg));
        if !(0.0..0.5).contains(&self.trim_fraction) {
            return bad(format!(
                "trim_fraction {} not in [0, 0.5)",
                self.trim_fraction
            ));
        }
        if self.target_slices == 0 {
            return bad("target_slices must be positive".into());
        }
        if self.resize_to == 0 {
            return bad("resize_to must be positive".into());
        }
        if self.window < 3 || self.window.is_multiple_of(2) {
            return bad(format!("window {} must be odd and >= 3", self.window));
        }
        if !(self.darkness_ratio > 0.0 && self.darkness_ratio < 1.0) {
            return bad(format!(
                "darkness_ratio {} not in (0, 1)",
                self.darkness_ratio
            ));
        }
        Ok(())
    }
}

/// What the pipeline saw and changed for one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcReport {
    pub patient_id: String,
    /// Slice means after resampling, before any repair.
    pub per_slice_mean_brightness: Vec<f64>,
    /// Slice means after repair, before normalization.
    pub repaired_mean_brightness: Vec<f64>,
    pub anomalous_indices: Vec<usize>,
    pub repairs_applied: usize,
    /// Slices whose min-max range was zero and were emitted as all-zero.
    pub degenerate_slices: Vec<usize>,
    pub passes: usize,
}

/// Keeps z-indices `[⌈f·nz⌉, nz − ⌈f·nz⌉)`.
pub fn trim_slices(vol: &VoxelVolume, fraction: f64) -> Result<VoxelVolume, QcError> {
    if !(0.0..0.5).contains(&fraction) {
        return Err(QcError::InvalidConfig(format!(
            "trim fraction {fraction} not in [0, 0.5)"
        )));
    }
    let nz = vol.nz();
    let cut = (fraction * nz as f64).ceil() as usize;
    if 2 * cut >= nz {
        return Err(QcError::EmptyResult { nz, fraction });
    }
    let [nx, ny, _] = vol.dims();
    let plane = nx * ny;
    let kept = vol.voxels()[cut * plane..(nz - cut) * plane].to_vec();
    Ok(vol.with_voxels([nx, ny, nz - 2 * cut], kept))
}

/// Continuous z position of output slice `k` out of `n`.
fn sample_position(k: usize, n: usize, nz: usize) -> f64 {
    if n == 1 {
        (nz - 1) as f64 / 2.0
    } else {
        k as f64 * (nz - 1) as f64 / (n - 1) as f64
    }
}

/// Resamples to exactly `n` slices by linear interpolation along z between
/// the two slices bracketing each sample position.
pub fn resample_slices(vol: &VoxelVolume, n: usize) -> VoxelVolume {
    assert!(n > 0, "target slice count must be positive");
    let [nx, ny, nz] = vol.dims();
    let mut out = Vec::with_capacity(nx * ny * n);
    for k in 0..n {
        let pos = sample_position(k, n, nz);
        let lo = (pos.floor() as usize).min(nz - 1);
        let hi = (lo + 1).min(nz - 1);
        let t = pos - lo as f64;
        let (a, b) = (vol.slice_data(lo), vol.slice_data(hi));
        if t == 0.0 {
            out.extend_from_slice(a);
        } else {
            out.extend(a.iter().zip(b).map(|(&p, &q)| p + t * (q - p)));
        }
    }
    vol.with_voxels([nx, ny, n], out)
}

/// Result of min-max normalization. `degenerate` is set when the input was
/// constant, in which case the image is all zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSlice {
    pub image: Image,
    pub degenerate: bool,
}

/// `x* = (x − min) / (max − min)`.
pub fn minmax_normalize(slice: &Image) -> NormalizedSlice {
    let (lo, hi) = slice.min_max();
    let range = hi - lo;
    if range <= 0.0 || !range.is_finite() {
        return NormalizedSlice {
            image: slice.map(|_| 0.0),
            degenerate: true,
        };
    }
    NormalizedSlice {
        image: slice.map(|v| ((v - lo) / range).clamp(0.0, 1.0)),
        degenerate: false,
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Flags index `i` when `means[i] < ratio · median(neighbours in window)`.
/// The window is centred on `i`, excludes `i` itself and is clipped at the
/// ends. A lone slice has no neighbours and is never flagged.
pub fn detect_dark_in_means(means: &[f64], window: usize, ratio: f64) -> Vec<usize> {
    assert!(
        window >= 3 && window % 2 == 1,
        "window must be odd and >= 3"
    );
    let half = window / 2;
    let mut flagged = Vec::new();
    let mut neighbours = Vec::with_capacity(window);
    for (i, &m) in means.iter().enumerate() {
        neighbours.clear();
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(means.len() - 1);
        neighbours.extend((lo..=hi).filter(|&j| j != i).map(|j| means[j]));
        if neighbours.is_empty() {
            continue;
        }
        if m < ratio * median(&mut neighbours) {
            flagged.push(i);
        }
    }
    flagged
}

pub fn detect_dark_slices(vol: &VoxelVolume, window: usize, ratio: f64) -> Vec<usize> {
    detect_dark_in_means(&vol.slice_means(), window, ratio)
}

/// Brings slice `idx` to the mean brightness of its adjacent slices
/// (`idx ± 1`), skipping any listed in `excluded`.
pub fn repair_slice(
    vol: &VoxelVolume,
    idx: usize,
    excluded: &[usize],
    mode: RepairMode,
) -> Result<VoxelVolume, QcError> {
    let nz = vol.nz();
    if idx >= nz {
        return Err(QcError::IndexOutOfRange { idx, nz });
    }
    let neighbours: Vec<usize> = [idx.checked_sub(1), Some(idx + 1)]
        .into_iter()
        .flatten()
        .filter(|&j| j < nz && !excluded.contains(&j))
        .collect();
    if neighbours.is_empty() {
        return Err(QcError::NoValidNeighbor(idx));
    }

    let target =
        neighbours.iter().map(|&j| vol.slice_mean(j)).sum::<f64>() / neighbours.len() as f64;
    let own = vol.slice_mean(idx);
    let mut out = vol.clone();

    // A slice with no positive brightness cannot be rescaled.
    if mode == RepairMode::Rescale && own > 0.0 {
        let factor = target / own;
        for v in out.slice_data_mut(idx) {
            *v *= factor;
        }
    } else {
        let w = 1.0 / neighbours.len() as f64;
        let avg: Vec<f64> = (0..vol.slice_data(idx).len())
            .map(|p| {
                neighbours
                    .iter()
                    .map(|&j| vol.slice_data(j)[p])
                    .sum::<f64>()
                    * w
            })
            .collect();
        out.slice_data_mut(idx).copy_from_slice(&avg);
    }
    Ok(out)
}

/// Bilinear resampling onto a `side × side` grid whose corner samples
/// coincide with the input corners.
pub fn resize_slice(slice: &Image, side: usize) -> Image {
    assert!(side > 0, "side must be positive");
    let (w, h) = (slice.width(), slice.height());
    if w == side && h == side {
        return slice.clone();
    }
    let coord = |i: usize, n_in: usize| -> f64 {
        if side == 1 {
            (n_in - 1) as f64 / 2.0
        } else {
            i as f64 * (n_in - 1) as f64 / (side - 1) as f64
        }
    };
    let bracket = |pos: f64, n_in: usize| -> (usize, usize, f64) {
        let lo = (pos.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, pos - lo as f64)
    };
    let xs: Vec<_> = (0..side).map(|i| bracket(coord(i, w), w)).collect();
    let mut data = Vec::with_capacity(side * side);
    for j in 0..side {
        let (y0, y1, ty) = bracket(coord(j, h), h);
        for &(x0, x1, tx) in &xs {
            let top = slice.get(x0, y0) + tx * (slice.get(x1, y0) - slice.get(x0, y0));
            let bottom = slice.get(x0, y1) + tx * (slice.get(x1, y1) - slice.get(x0, y1));
            data.push(top + ty * (bottom - top));
        }
    }
    Image::new(side, side, data).expect("side is positive")
}

/// Detects and repairs dark slices for up to [`MAX_REPAIR_PASSES`] passes.
/// Returns the repaired volume, the sorted set of repaired indices and the
/// number of passes that found something.
pub fn repair_dark_slices(
    vol: &VoxelVolume,
    window: usize,
    ratio: f64,
    mode: RepairMode,
) -> Result<(VoxelVolume, Vec<usize>, usize), QcError> {
    let mut current = vol.clone();
    let mut repaired: Vec<usize> = Vec::new();
    let mut passes = 0;
    for _ in 0..MAX_REPAIR_PASSES {
        let mut pending = detect_dark_slices(&current, window, ratio);
        if pending.is_empty() {
            break;
        }
        passes += 1;
        for &i in &pending {
            if !repaired.contains(&i) {
                repaired.push(i);
            }
        }
        // Repair slices with a clean neighbour first; once repaired they can
        // serve as neighbours for the rest of a dark run.
        while !pending.is_empty() {
            let pos = pending
                .iter()
                .position(|&i| {
                    [i.checked_sub(1), Some(i + 1)]
                        .into_iter()
                        .flatten()
                        .any(|j| j < current.nz() && !pending.contains(&j))
                })
                .ok_or(QcError::NoValidNeighbor(pending[0]))?;
            let idx = pending.remove(pos);
            current = repair_slice(&current, idx, &pending, mode)?;
        }
    }
    repaired.sort_unstable();
    Ok((current, repaired, passes))
}

/// Full standardization: trim → resample → detect and repair → per-slice
/// min-max normalization → resize.
///
/// Detection works on slice mean brightness, so volumes with negative values
/// (raw Hounsfield units) are shifted to start at zero first. The shift does
/// not change the normalized output.
pub fn run_pipeline(
    vol: &VoxelVolume,
    cfg: &PipelineConfig,
) -> Result<(SliceStack, QcReport), QcError> {
    cfg.validate()?;
    let trimmed = trim_slices(vol, cfg.trim_fraction)?;
    let mut resampled = resample_slices(&trimmed, cfg.target_slices);

    let min = resampled
        .voxels()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if min < 0.0 {
        let shifted = resampled.voxels().iter().map(|v| v - min).collect();
        resampled = resampled.with_voxels(resampled.dims(), shifted);
    }
    let before = resampled.slice_means();

    let (repaired, anomalous, passes) =
        repair_dark_slices(&resampled, cfg.window, cfg.darkness_ratio, cfg.repair_mode)?;

    let mut degenerate = Vec::new();
    let slices = (0..repaired.nz())
        .map(|z| {
            let norm = minmax_normalize(&repaired.slice(z));
            if norm.degenerate {
                degenerate.push(z);
            }
            resize_slice(&norm.image, cfg.resize_to)
        })
        .collect();

    let report = QcReport {
        patient_id: vol.patient_id.clone(),
        per_slice_mean_brightness: before,
        repaired_mean_brightness: repaired.slice_means(),
        repairs_applied: anomalous.len(),
        anomalous_indices: anomalous,
        degenerate_slices: degenerate,
        passes,
    };
    let stack = SliceStack::new(vol.patient_id.clone(), vol.label, cfg.resize_to, slices)
        .expect("pipeline emits square slices of the configured side");
    Ok((stack, report))
}
