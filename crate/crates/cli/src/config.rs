//! Experiment configuration file. Every section is optional; missing fields
//! take their defaults, unknown fields are rejected.

use crate::error::{CliError, CliResult};
use ctqc::gan_qc::AnoSearchConfig;
use ctqc::harness::{CvConfig, TrainConfig};
use ctqc::losses::{make_loss, ClassStats, LossSpec, ScalingMode};
use ctqc::qc::PipelineConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub m: Vec<f64>,
    pub s: Vec<f64>,
    pub scaling_mode: ScalingMode,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub pipeline: PipelineConfig,
    pub loss: LossSpec,
    pub train: TrainConfig,
    pub cv: CvConfig,
    pub grid: GridConfig,
    pub anomaly: AnoSearchConfig,
    pub paths: Paths,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |e: String| CliError::Config(e);
        self.pipeline.validate().map_err(|e| bad(e.to_string()))?;
        self.train.validate().map_err(|e| bad(e.to_string()))?;
        if self.cv.k < 2 {
            return Err(bad(format!("cv.k must be at least 2, got {}", self.cv.k)));
        }
        // parameters are checked against a neutral class tally
        let probe = ClassStats::new(vec![1; 4]).expect("valid tally");
        make_loss(&self.loss, &probe).map_err(|e| bad(e.to_string()))?;
        self.anomaly.validate().map_err(|e| bad(e.to_string()))?;
        Ok(())
    }

    /// A `--seed` flag reseeds every stochastic stage.
    pub fn apply_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.cv.seed = seed;
        self.anomaly.seed = seed;
    }

    pub fn manifest(&self) -> CliResult<&Path> {
        self.paths.manifest.as_deref().ok_or_else(|| {
            CliError::Config("no manifest given (paths.manifest or --manifest)".into())
        })
    }

    pub fn output_dir(&self) -> PathBuf {
        self.paths
            .output
            .clone()
            .unwrap_or_else(|| PathBuf::from("."))
    }
}
