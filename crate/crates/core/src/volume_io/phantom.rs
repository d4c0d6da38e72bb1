//! Deterministic synthetic chest phantoms.
//!
//! Intensities use the stored-value convention (HU + 1024) so every voxel is
//! nonnegative before noise: soft tissue fills the volume, the central box
//! spanning the middle half of each axis is aerated lung, and a seeded subset
//! of lung voxels is raised to consolidation intensity.

use super::{Severity, VoxelVolume};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const BODY_INTENSITY: f64 = 1064.0;
pub const LUNG_INTENSITY: f64 = 224.0;
pub const LESION_INTENSITY: f64 = 724.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    /// Fraction of lung voxels raised to lesion intensity, in `[0, 1)`.
    pub lesion_fraction: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise_level: f64,
    pub seed: u64,
}

/// Severity band for a lesion fraction: 0 → CT0, ≤ 0.25 → CT1, ≤ 0.5 → CT2,
/// anything larger → CT3.
pub fn severity_for_fraction(fraction: f64) -> Severity {
    if fraction <= 0.0 {
        Severity::CT0
    } else if fraction <= 0.25 {
        Severity::CT1
    } else if fraction <= 0.5 {
        Severity::CT2
    } else {
        Severity::CT3
    }
}

/// Half-open index range covering the middle half of an axis of length `n`.
pub(crate) fn central_range(n: usize) -> std::ops::Range<usize> {
    n / 4..n - n / 4
}

pub fn synth_phantom(spec: &PhantomSpec) -> VoxelVolume {
    let [nx, ny, nz] = spec.dims;
    assert!(nx > 0 && ny > 0 && nz > 0, "phantom dims must be positive");
    assert!(
        (0.0..1.0).contains(&spec.lesion_fraction),
        "lesion fraction must lie in [0, 1)"
    );
    assert!(spec.noise_level >= 0.0, "noise level must be nonnegative");

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (rx, ry, rz) = (central_range(nx), central_range(ny), central_range(nz));
    let flat = |x: usize, y: usize, z: usize| (z * ny + y) * nx + x;

    let mut voxels = vec![BODY_INTENSITY; nx * ny * nz];
    let mut lung = Vec::with_capacity(rx.len() * ry.len() * rz.len());
    for z in rz.clone() {
        for y in ry.clone() {
            for x in rx.clone() {
                let i = flat(x, y, z);
                voxels[i] = LUNG_INTENSITY;
                lung.push(i);
            }
        }
    }

    let lesions = (spec.lesion_fraction * lung.len() as f64).floor() as usize;
    for pick in index::sample(&mut rng, lung.len(), lesions) {
        voxels[lung[pick]] = LESION_INTENSITY;
    }

    if spec.noise_level > 0.0 {
        let normal = Normal::new(0.0, spec.noise_level).expect("finite noise level");
        for v in &mut voxels {
            *v += normal.sample(&mut rng);
        }
    }

    VoxelVolume::new(spec.dims, voxels)
        .expect("phantom voxels are finite and shaped")
        .with_label(Some(severity_for_fraction(spec.lesion_fraction)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(fraction: f64, noise: f64, seed: u64) -> PhantomSpec {
        PhantomSpec {
            dims: [16, 12, 8],
            lesion_fraction: fraction,
            noise_level: noise,
            seed,
        }
    }

    #[test]
    fn clean_phantom_has_uniform_lung() {
        let v = synth_phantom(&spec(0.0, 0.0, 1));
        assert_eq!(v.label, Some(Severity::CT0));
        for z in central_range(8) {
            for y in central_range(12) {
                for x in central_range(16) {
                    assert_eq!(v.get(x, y, z), LUNG_INTENSITY);
                }
            }
        }
        assert_eq!(v.get(0, 0, 0), BODY_INTENSITY);
    }

    #[test]
    fn lesion_count_is_exact() {
        let v = synth_phantom(&spec(0.4, 0.0, 9));
        assert_eq!(v.label, Some(Severity::CT2));
        let region = 8 * 6 * 4;
        let lesions = v
            .voxels()
            .iter()
            .filter(|&&x| x == LESION_INTENSITY)
            .count();
        assert_eq!(lesions, (0.4 * region as f64).floor() as usize);
    }

    #[test]
    fn same_seed_same_volume() {
        let a = synth_phantom(&spec(0.3, 25.0, 42));
        let b = synth_phantom(&spec(0.3, 25.0, 42));
        assert_eq!(a, b);
        assert_ne!(a, synth_phantom(&spec(0.3, 25.0, 43)));
    }

    #[test]
    fn banding() {
        assert_eq!(severity_for_fraction(0.25), Severity::CT1);
        assert_eq!(severity_for_fraction(0.2500001), Severity::CT2);
        assert_eq!(severity_for_fraction(0.5), Severity::CT2);
        assert_eq!(severity_for_fraction(0.75), Severity::CT3);
    }

    proptest! {
        #[test]
        fn label_is_monotone_in_fraction(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(severity_for_fraction(lo) <= severity_for_fraction(hi));
        }
    }
}
