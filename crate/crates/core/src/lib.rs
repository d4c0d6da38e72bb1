//! Quality control and imbalance-aware classification for volumetric CT data.
//!
//! The crate is organised by pipeline stage:
//!
//! | Module | Purpose |
//! |---|---|
//! | [`volume_io`] | NIfTI-1 parsing, dataset manifests, synthetic phantoms |
//! | [`qc`] | slice trimming, resampling, dark-slice repair, normalization, resizing |
//! | [`losses`] | LDAM, focal, class-balanced and cross-entropy losses with analytic gradients |
//! | [`metrics`] | confusion matrices, MCC, F1, balanced accuracy, kappa, stratified folds |
//! | [`gan_qc`] | masking operator, adversarial loss algebra and latent-space anomaly scoring |
//! | [`harness`] | linear softmax classifier, cross-validation, grid search, patient voting |

pub mod gan_qc;
pub mod harness;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod qc;
pub mod volume_io;

pub use image::Image;
pub use volume_io::{Severity, VoxelVolume};
