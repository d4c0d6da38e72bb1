//! `ctqc`: standardize CT volumes, train and cross-validate imbalance-aware
//! classifiers, diagnose patients and score anomalies.
//!
//! Exit codes: 0 success, 2 input or parse error, 3 pipeline error,
//! 4 fold split error, 5 configuration error.

mod commands;
mod config;
mod data;
mod error;

use clap::{Parser, Subcommand};
use commands::{SynthArgs, SynthFormat};
use config::ExperimentConfig;
use error::{CliError, CliResult};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "ctqc",
    version,
    about = "CT quality control and severity classification"
)]
struct Cli {
    /// JSON experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stochastic stage; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the slice pipeline on NIfTI volumes, writing stacks and QC reports.
    Preprocess {
        inputs: Vec<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Stratified k-fold cross-validation over a manifest.
    Crossval {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train on every manifest entry and write the model.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Score a trained model on a manifest.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Per-slice predictions and a patient-level vote for one stack.
    Diagnose {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        stack: PathBuf,
    },
    /// Cross-validated macro MCC over an LDAM (m, s) grid.
    Gridsearch {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        m: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        s: Vec<f64>,
    },
    /// Latent-search anomaly scores for every slice of a stack.
    Anoscore {
        #[arg(long)]
        stack: PathBuf,
        #[arg(long)]
        generator: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        lambda: Option<f64>,
        #[arg(long, default_value_t = 0.034, allow_negative_numbers = true)]
        threshold: f64,
        /// Score per pixel and per feature instead of summed.
        #[arg(long)]
        normalize: bool,
        /// Pooling cell of the feature map.
        #[arg(long, default_value_t = 2)]
        cell: usize,
    },
    /// Generate a labelled synthetic dataset and its manifest.
    Synth {
        /// Patients per class, CT0 first.
        #[arg(long, value_delimiter = ',', default_values_t = [8usize, 12, 6, 4])]
        counts: Vec<usize>,
        #[arg(long, value_enum, default_value_t = SynthFormat::Stack)]
        format: SynthFormat,
        /// Slices per patient.
        #[arg(long, default_value_t = 10)]
        slices: usize,
        #[arg(long, default_value_t = 32)]
        side: usize,
        #[arg(long, default_value_t = 40.0)]
        noise: f64,
        /// Darken this slice of every volume to a fifth (nifti only).
        #[arg(long)]
        darken: Option<usize>,
    },
}

fn resolve_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    if let Some(out) = &cli.output {
        cfg.paths.output = Some(out.clone());
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let mut cfg = resolve_config(&cli)?;
    let set_manifest = |cfg: &mut ExperimentConfig, m: &Option<PathBuf>| {
        if let Some(m) = m {
            cfg.paths.manifest = Some(m.clone());
        }
    };
    match &cli.command {
        Command::Preprocess { manifest, .. }
        | Command::Crossval { manifest }
        | Command::Train { manifest }
        | Command::Evaluate { manifest, .. }
        | Command::Gridsearch { manifest, .. } => set_manifest(&mut cfg, manifest),
        Command::Anoscore {
            lambda, normalize, ..
        } => {
            if let Some(l) = lambda {
                cfg.anomaly.lambda = *l;
            }
            cfg.anomaly.normalize |= *normalize;
        }
        _ => {}
    }
    cfg.validate()?;

    match cli.command {
        Command::Preprocess { inputs, .. } => commands::preprocess(&cfg, &inputs),
        Command::Crossval { .. } => commands::crossval(&cfg),
        Command::Train { .. } => commands::train(&cfg),
        Command::Evaluate { model, .. } => commands::evaluate(&cfg, &model),
        Command::Diagnose { model, stack } => commands::diagnose_stack(&cfg, &model, &stack),
        Command::Gridsearch { m, s, .. } => commands::gridsearch(&cfg, &m, &s),
        Command::Anoscore {
            stack,
            generator,
            threshold,
            cell,
            ..
        } => commands::anoscore(&cfg, &stack, &generator, threshold, cell),
        Command::Synth {
            counts,
            format,
            slices,
            side,
            noise,
            darken,
        } => commands::synth(
            &cfg,
            &SynthArgs {
                counts,
                format,
                slices,
                side,
                noise,
                darken,
                seed: cli.seed.unwrap_or(cfg.train.seed),
            },
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
