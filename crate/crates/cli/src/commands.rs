//! Subcommand implementations. Each writes its artifacts under the output
//! directory and logs one line per file to stderr.

use crate::config::ExperimentConfig;
use crate::data::{load_examples, open_manifest, read_stack};
use crate::error::{CliError, CliResult};
use ctqc::gan_qc::{
    latent_search, threshold_classify, AffineGenerator, AnomalyResult, PooledFeatures, Verdict,
};
use ctqc::harness::{
    cross_validate, diagnose, evaluate_fold, featurize, grid_search, predict, synth_slice_dataset,
    train_with_history, Example, LinearModel, SyntheticSpec, LESION_BANDS,
};
use ctqc::losses::{make_loss, ClassStats};
use ctqc::metrics::MacroMetrics;
use ctqc::qc::{run_pipeline, SliceStack};
use ctqc::volume_io::{
    read_nifti, serialize_nifti, synth_phantom, DatasetManifest, Endianness, ManifestEntry,
    NiftiDatatype, PhantomSpec,
};
use ctqc::{Image, Severity, VoxelVolume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::path::{Path, PathBuf};

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable output");
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn class_name(class: usize) -> String {
    Severity::from_index(class).map_or_else(|| class.to_string(), |s| s.to_string())
}

pub fn preprocess(cfg: &ExperimentConfig, inputs: &[PathBuf]) -> CliResult<()> {
    let mut jobs: Vec<(PathBuf, Option<Severity>)> =
        inputs.iter().map(|p| (p.clone(), None)).collect();
    if let Some(manifest) = &cfg.paths.manifest {
        let ds = open_manifest(manifest)?;
        jobs.extend(
            ds.paths
                .into_iter()
                .zip(ds.manifest.entries().iter().map(|e| Some(e.label))),
        );
    }
    if jobs.is_empty() {
        return Err(CliError::Config("no input volumes given".into()));
    }
    let out = cfg.output_dir();
    for (path, label) in jobs {
        let vol =
            read_nifti(&path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let vol = match label {
            Some(l) => vol.with_label(Some(l)),
            None => vol,
        };
        let (stack, report) = run_pipeline(&vol, &cfg.pipeline)
            .map_err(|e| CliError::Pipeline(format!("patient {}: {e}", vol.patient_id)))?;
        write_file(
            &out.join(format!("{}.stack", vol.patient_id)),
            &stack.to_bytes(),
        )?;
        write_json(&out.join(format!("{}.qc.json", vol.patient_id)), &report)?;
    }
    Ok(())
}

fn training_stats(data: &[Example]) -> CliResult<ClassStats> {
    let labels: Vec<usize> = data.iter().map(|e| e.label).collect();
    ClassStats::from_labels(&labels, Severity::COUNT)
        .map_err(|e| CliError::Input(format!("training data: {e}")))
}

pub fn crossval(cfg: &ExperimentConfig) -> CliResult<()> {
    let ds = open_manifest(cfg.manifest()?)?;
    let data = load_examples(&ds, &cfg.pipeline)?;
    let result = cross_validate(&data, Severity::COUNT, &cfg.loss, &cfg.train, &cfg.cv)?;
    let out = cfg.output_dir();
    write_json(&out.join("crossval.json"), &result)?;
    let mut csv = String::from("metric,mean,sd\n");
    let (mean, sd) = (result.summary.mean.values(), result.summary.sd.values());
    for (i, name) in MacroMetrics::NAMES.iter().enumerate() {
        csv.push_str(&format!("{name},{},{}\n", mean[i], sd[i]));
    }
    write_file(&out.join("crossval_summary.csv"), csv.as_bytes())
}

#[derive(Serialize)]
struct TrainSummary {
    loss: ctqc::losses::LossKind,
    class_counts: Vec<u64>,
    epoch_losses: Vec<f64>,
}

pub fn train(cfg: &ExperimentConfig) -> CliResult<()> {
    let ds = open_manifest(cfg.manifest()?)?;
    let data = load_examples(&ds, &cfg.pipeline)?;
    let stats = training_stats(&data)?;
    let loss = make_loss(&cfg.loss, &stats).map_err(|e| CliError::Config(e.to_string()))?;
    let outcome = train_with_history(&data, &stats, &loss, &cfg.train)?;
    let out = cfg.output_dir();
    write_file(&out.join("model.bin"), &outcome.model.to_bytes())?;
    write_json(
        &out.join("train.json"),
        &TrainSummary {
            loss: cfg.loss.kind,
            class_counts: stats.counts().to_vec(),
            epoch_losses: outcome.epoch_losses,
        },
    )
}

fn read_model(path: &Path) -> CliResult<LinearModel> {
    let bytes =
        std::fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    LinearModel::from_bytes(&bytes).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub fn evaluate(cfg: &ExperimentConfig, model: &Path) -> CliResult<()> {
    let model = read_model(model)?;
    let ds = open_manifest(cfg.manifest()?)?;
    let data = load_examples(&ds, &cfg.pipeline)?;
    let report = evaluate_fold(&model, &data)?;
    write_json(&cfg.output_dir().join("evaluation.json"), &report)
}

#[derive(Serialize)]
struct DiagnosisOutput {
    patient_id: String,
    per_slice_predictions: Vec<String>,
    vote_counts: Vec<usize>,
    final_class: usize,
    diagnosis: String,
}

pub fn diagnose_stack(cfg: &ExperimentConfig, model: &Path, stack: &Path) -> CliResult<()> {
    let model = read_model(model)?;
    let stack = read_stack(stack)?;
    let mut classes = Vec::with_capacity(stack.len());
    for (i, slice) in stack.slices().iter().enumerate() {
        let (_, class) = predict(&model, &featurize(slice))
            .map_err(|e| CliError::Input(format!("slice {i}: {e}")))?;
        classes.push(class);
    }
    let d = diagnose(&classes, model.num_classes())
        .map_err(|e| CliError::Input(format!("patient {}: {e}", stack.patient_id)))?;
    let out = DiagnosisOutput {
        patient_id: stack.patient_id.clone(),
        per_slice_predictions: d
            .per_slice_predictions
            .iter()
            .map(|&c| class_name(c))
            .collect(),
        vote_counts: d.vote_counts,
        final_class: d.final_class,
        diagnosis: class_name(d.final_class),
    };
    write_json(
        &cfg.output_dir()
            .join(format!("{}.diagnosis.json", stack.patient_id)),
        &out,
    )
}

pub fn gridsearch(cfg: &ExperimentConfig, ms: &[f64], ss: &[f64]) -> CliResult<()> {
    let ms = if ms.is_empty() { &cfg.grid.m[..] } else { ms };
    let ss = if ss.is_empty() { &cfg.grid.s[..] } else { ss };
    if ms.is_empty() || ss.is_empty() {
        return Err(CliError::Config(
            "grid needs at least one m and one s value".into(),
        ));
    }
    if let Some(bad) = ms.iter().chain(ss).find(|v| !v.is_finite()) {
        return Err(CliError::Config(format!("grid value {bad} is not finite")));
    }
    let ds = open_manifest(cfg.manifest()?)?;
    let data = load_examples(&ds, &cfg.pipeline)?;
    let grid = grid_search(
        &data,
        Severity::COUNT,
        ms,
        ss,
        cfg.grid.scaling_mode,
        &cfg.train,
        &cfg.cv,
    )
    .map_err(|e| match CliError::from(e) {
        CliError::Split(msg) => CliError::Split(msg),
        other => CliError::Config(other.to_string()),
    })?;
    write_file(
        &cfg.output_dir().join("gridsearch.csv"),
        grid.to_csv().as_bytes(),
    )
}

#[derive(Serialize)]
struct SliceScore {
    slice: usize,
    #[serde(flatten)]
    result: AnomalyResult,
    verdict: Verdict,
}

#[derive(Serialize)]
struct AnoscoreOutput {
    patient_id: String,
    lambda: f64,
    threshold: f64,
    normalized: bool,
    slices: Vec<SliceScore>,
}

pub fn anoscore(
    cfg: &ExperimentConfig,
    stack: &Path,
    generator: &Path,
    threshold: f64,
    cell: usize,
) -> CliResult<()> {
    cfg.anomaly
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    if threshold.is_nan() {
        return Err(CliError::Config("threshold must be a number".into()));
    }
    let stack = read_stack(stack)?;
    let bytes = std::fs::read(generator)
        .map_err(|e| CliError::Input(format!("{}: {e}", generator.display())))?;
    let gen = AffineGenerator::from_bytes(&bytes)
        .map_err(|e| CliError::Input(format!("{}: {e}", generator.display())))?;
    if gen.width() != stack.side() || gen.height() != stack.side() {
        return Err(CliError::Input(format!(
            "generator produces {}x{} images, stack slices are {}x{}",
            gen.width(),
            gen.height(),
            stack.side(),
            stack.side()
        )));
    }
    let features = PooledFeatures { cell: cell.max(1) };
    let mut slices = Vec::with_capacity(stack.len());
    for (i, x) in stack.slices().iter().enumerate() {
        let result = latent_search(x, &gen, &features, &cfg.anomaly)
            .map_err(|e| CliError::Input(format!("slice {i}: {e}")))?;
        slices.push(SliceScore {
            slice: i,
            verdict: threshold_classify(result.score, threshold),
            result,
        });
    }
    write_json(
        &cfg.output_dir()
            .join(format!("{}.anoscore.json", stack.patient_id)),
        &AnoscoreOutput {
            patient_id: stack.patient_id.clone(),
            lambda: cfg.anomaly.lambda,
            threshold,
            normalized: cfg.anomaly.normalize,
            slices,
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SynthFormat {
    /// Raw phantom volumes as int16 NIfTI files.
    Nifti,
    /// Normalized slice stacks.
    Stack,
}

pub struct SynthArgs {
    pub counts: Vec<usize>,
    pub format: SynthFormat,
    pub slices: usize,
    pub side: usize,
    pub noise: f64,
    pub darken: Option<usize>,
    pub seed: u64,
}

/// Writes one file per patient plus `manifest.csv` naming them.
pub fn synth(cfg: &ExperimentConfig, args: &SynthArgs) -> CliResult<()> {
    if args.counts.is_empty() || args.counts.len() > Severity::COUNT {
        return Err(CliError::Config(
            "counts needs one to four class sizes".into(),
        ));
    }
    if args.side == 0 || args.slices == 0 || args.noise.is_nan() || args.noise < 0.0 {
        return Err(CliError::Config(
            "side and slices must be positive, noise nonnegative".into(),
        ));
    }
    let out = cfg.output_dir();
    let mut entries = Vec::new();
    match args.format {
        SynthFormat::Stack => {
            let data = synth_slice_dataset(&SyntheticSpec {
                counts: args.counts.clone(),
                slices_per_patient: args.slices,
                side: args.side,
                noise_level: args.noise,
                seed: args.seed,
            });
            for group in data.chunk_by(|a, b| a.patient == b.patient) {
                let label = Severity::from_index(group[0].label).expect("class below four");
                let id = format!("p{:04}", group[0].patient);
                let images: Vec<Image> = group.iter().map(|s| s.image.clone()).collect();
                let stack = SliceStack::new(id.clone(), Some(label), args.side, images)
                    .map_err(|e| CliError::Config(e.to_string()))?;
                let name = format!("{id}.stack");
                write_file(&out.join(&name), &stack.to_bytes())?;
                entries.push(ManifestEntry {
                    path: name.into(),
                    label,
                });
            }
        }
        SynthFormat::Nifti => {
            if let Some(z) = args.darken {
                if z >= args.slices {
                    return Err(CliError::Config(format!(
                        "darken index {z} outside {} slices",
                        args.slices
                    )));
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            let mut patient = 0;
            for (class, &count) in args.counts.iter().enumerate() {
                let label = Severity::from_index(class).expect("class below four");
                let (lo, hi) = LESION_BANDS[class];
                for _ in 0..count {
                    let fraction = if hi > lo {
                        rng.random_range(lo..hi)
                    } else {
                        lo
                    };
                    let vol = synth_phantom(&PhantomSpec {
                        dims: [args.side, args.side, args.slices],
                        lesion_fraction: fraction,
                        noise_level: args.noise,
                        seed: rng.random(),
                    });
                    let vol = integer_volume(&vol, args.darken);
                    let id = format!("p{patient:04}");
                    let bytes = serialize_nifti(&vol, NiftiDatatype::Int16, Endianness::Little)
                        .map_err(|e| CliError::Config(e.to_string()))?;
                    let name = format!("{id}.nii");
                    write_file(&out.join(&name), &bytes)?;
                    entries.push(ManifestEntry {
                        path: name.into(),
                        label,
                    });
                    patient += 1;
                }
            }
        }
    }
    let manifest = DatasetManifest::from_entries(entries);
    write_file(&out.join("manifest.csv"), manifest.to_text().as_bytes())
}

/// Rounds to int16 range, optionally darkening one slice to a fifth.
fn integer_volume(vol: &VoxelVolume, darken: Option<usize>) -> VoxelVolume {
    let plane = vol.nx() * vol.ny();
    let voxels = vol
        .voxels()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let v = if darken == Some(i / plane) {
                v * 0.2
            } else {
                v
            };
            v.round().clamp(i16::MIN as f64, i16::MAX as f64)
        })
        .collect();
    VoxelVolume::new(vol.dims(), voxels).expect("same dims as the source volume")
}
