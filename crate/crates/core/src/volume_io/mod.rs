//! Volume ingestion: NIfTI-1 parsing, dataset manifests and synthetic phantoms.
//!
//! Voxels are stored x-fastest, matching the on-disk NIfTI layout, and are
//! converted to `f64` at parse time regardless of the stored datatype.

mod manifest;
mod nifti;
mod phantom;

pub use manifest::{load_manifest, parse_manifest, DatasetManifest, ManifestEntry, ManifestError};
pub use nifti::{
    parse_nifti, read_nifti, serialize_nifti, Endianness, NiftiDatatype, NiftiError,
    NIFTI1_HEADER_SIZE,
};
pub use phantom::{
    severity_for_fraction, synth_phantom, PhantomSpec, BODY_INTENSITY, LESION_INTENSITY,
    LUNG_INTENSITY,
};

use crate::image::Image;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Patient-level severity class. CT-4 exists in the source data but is
/// excluded from the classification task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Severity {
    CT0,
    CT1,
    CT2,
    CT3,
}

impl Severity {
    pub const COUNT: usize = 4;
    pub const ALL: [Severity; 4] = [Severity::CT0, Severity::CT1, Severity::CT2, Severity::CT3];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(idx: usize) -> Option<Severity> {
        Self::ALL.get(idx).copied()
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CT{}", self.index())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown severity label {0:?}")]
pub struct UnknownSeverity(pub String);

impl FromStr for Severity {
    type Err = UnknownSeverity;

    /// Accepts `CT0`..`CT3`, with or without a dash and in any case.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .trim()
            .chars()
            .filter(|c| *c != '-')
            .collect::<String>()
            .to_ascii_uppercase();
        match norm.as_str() {
            "CT0" => Ok(Severity::CT0),
            "CT1" => Ok(Severity::CT1),
            "CT2" => Ok(Severity::CT2),
            "CT3" => Ok(Severity::CT3),
            _ => Err(UnknownSeverity(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VolumeError {
    #[error("volume dimensions must be positive, got {0:?}")]
    ZeroDimension([usize; 3]),
    #[error("voxel count {actual} does not match dims product {expected}")]
    CountMismatch { expected: usize, actual: usize },
    #[error("voxel {0} is not finite")]
    NonFinite(usize),
}

/// 3D scalar field in acquisition units, indexed `(x, y, z)` with x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelVolume {
    dims: [usize; 3],
    voxels: Vec<f64>,
    pub patient_id: String,
    pub label: Option<Severity>,
}

impl VoxelVolume {
    pub fn new(dims: [usize; 3], voxels: Vec<f64>) -> Result<Self, VolumeError> {
        if dims.contains(&0) {
            return Err(VolumeError::ZeroDimension(dims));
        }
        let expected = dims[0] * dims[1] * dims[2];
        if voxels.len() != expected {
            return Err(VolumeError::CountMismatch {
                expected,
                actual: voxels.len(),
            });
        }
        if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite(i));
        }
        Ok(Self {
            dims,
            voxels,
            patient_id: String::new(),
            label: None,
        })
    }

    /// Stacks equally-shaped slices along z.
    pub fn from_slices(slices: &[Image]) -> Result<Self, VolumeError> {
        let first = slices
            .first()
            .ok_or(VolumeError::ZeroDimension([0, 0, 0]))?;
        let (nx, ny) = (first.width(), first.height());
        let mut voxels = Vec::with_capacity(nx * ny * slices.len());
        for s in slices {
            if s.width() != nx || s.height() != ny {
                return Err(VolumeError::CountMismatch {
                    expected: nx * ny,
                    actual: s.len(),
                });
            }
            voxels.extend_from_slice(s.as_slice());
        }
        Self::new([nx, ny, slices.len()], voxels)
    }

    pub fn with_patient_id(mut self, id: impl Into<String>) -> Self {
        self.patient_id = id.into();
        self
    }

    pub fn with_label(mut self, label: Option<Severity>) -> Self {
        self.label = label;
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn nx(&self) -> usize {
        self.dims[0]
    }

    pub fn ny(&self) -> usize {
        self.dims[1]
    }

    pub fn nz(&self) -> usize {
        self.dims[2]
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.voxels[(z * self.dims[1] + y) * self.dims[0] + x]
    }

    fn slice_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    /// Raw voxels of slice `z`.
    pub fn slice_data(&self, z: usize) -> &[f64] {
        let n = self.slice_len();
        &self.voxels[z * n..(z + 1) * n]
    }

    pub fn slice_data_mut(&mut self, z: usize) -> &mut [f64] {
        let n = self.slice_len();
        &mut self.voxels[z * n..(z + 1) * n]
    }

    pub fn slice(&self, z: usize) -> Image {
        Image::new(self.dims[0], self.dims[1], self.slice_data(z).to_vec())
            .expect("volume slices are nonempty")
    }

    pub fn slices(&self) -> Vec<Image> {
        (0..self.nz()).map(|z| self.slice(z)).collect()
    }

    pub fn slice_mean(&self, z: usize) -> f64 {
        let s = self.slice_data(z);
        s.iter().sum::<f64>() / s.len() as f64
    }

    pub fn slice_means(&self) -> Vec<f64> {
        (0..self.nz()).map(|z| self.slice_mean(z)).collect()
    }

    /// Replaces the voxel array of a volume with the same metadata.
    pub(crate) fn with_voxels(&self, dims: [usize; 3], voxels: Vec<f64>) -> VoxelVolume {
        debug_assert_eq!(voxels.len(), dims.iter().product::<usize>());
        VoxelVolume {
            dims,
            voxels,
            patient_id: self.patient_id.clone(),
            label: self.label,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn severity_parsing_accepts_dashed_forms() {
        assert_eq!("CT-2".parse::<Severity>().unwrap(), Severity::CT2);
        assert_eq!("ct3".parse::<Severity>().unwrap(), Severity::CT3);
        assert!("CT9".parse::<Severity>().is_err());
        assert!("CT4".parse::<Severity>().is_err());
    }

    #[test]
    fn volume_rejects_bad_shapes() {
        assert!(VoxelVolume::new([2, 2, 1], vec![0.0; 3]).is_err());
        assert!(VoxelVolume::new([0, 2, 1], vec![]).is_err());
        assert!(VoxelVolume::new([1, 1, 1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn indexing_is_x_fastest() {
        let v = VoxelVolume::new([2, 3, 2], (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(v.get(1, 0, 0), 1.0);
        assert_eq!(v.get(0, 1, 0), 2.0);
        assert_eq!(v.get(0, 0, 1), 6.0);
        assert_eq!(v.slice(1).get(1, 2), 11.0);
    }
}
