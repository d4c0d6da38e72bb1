//! Labelled synthetic slices built from single-slice phantoms, for
//! exercising the classifier without real scans.

use super::{featurize, Example};
use crate::image::Image;
use crate::qc::minmax_normalize;
use crate::volume_io::{synth_phantom, PhantomSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Half-open lesion-fraction range drawn for each class; CT0 is exactly 0.
pub const LESION_BANDS: [(f64, f64); 4] = [(0.0, 0.0), (0.05, 0.25), (0.25, 0.5), (0.5, 0.75)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Patients per class, indexed by severity.
    pub counts: Vec<usize>,
    pub slices_per_patient: usize,
    pub side: usize,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            counts: vec![254, 684, 125, 45],
            slices_per_patient: 1,
            side: 32,
            noise_level: 40.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSlice {
    pub image: Image,
    pub label: usize,
    pub patient: usize,
}

impl LabeledSlice {
    pub fn example(&self) -> Example {
        Example {
            features: featurize(&self.image),
            label: self.label,
            group: self.patient,
        }
    }
}

/// Normalized slices grouped by patient, patients listed class by class.
/// Each patient has one lesion fraction drawn from its class band; its
/// slices differ only in lesion placement and noise.
pub fn synth_slice_dataset(spec: &SyntheticSpec) -> Vec<LabeledSlice> {
    assert!(
        spec.counts.len() <= LESION_BANDS.len(),
        "at most four classes"
    );
    assert!(spec.side > 0 && spec.slices_per_patient > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::new();
    let mut patient = 0;
    for (label, &count) in spec.counts.iter().enumerate() {
        let (lo, hi) = LESION_BANDS[label];
        for _ in 0..count {
            let fraction = if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            };
            for _ in 0..spec.slices_per_patient {
                let vol = synth_phantom(&PhantomSpec {
                    dims: [spec.side, spec.side, 1],
                    lesion_fraction: fraction,
                    noise_level: spec.noise_level,
                    seed: rng.random(),
                });
                out.push(LabeledSlice {
                    image: minmax_normalize(&vol.slice(0)).image,
                    label,
                    patient,
                });
            }
            patient += 1;
        }
    }
    out
}
