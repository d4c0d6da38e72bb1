//! Loading volumes and slice stacks named by a manifest.

use crate::error::{CliError, CliResult};
use ctqc::harness::{featurize, Example};
use ctqc::qc::{run_pipeline, PipelineConfig, SliceStack};
use ctqc::volume_io::{load_manifest, read_nifti, DatasetManifest};
use rayon::prelude::*;
use std::path::{Path, PathBuf};

fn is_nifti(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("nii"))
}

pub fn read_stack(path: &Path) -> CliResult<SliceStack> {
    let bytes =
        std::fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    SliceStack::from_bytes(&bytes).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// A `.nii` volume is run through the pipeline; anything else is read as a
/// stack file.
pub fn load_stack(path: &Path, pipeline: &PipelineConfig) -> CliResult<SliceStack> {
    if !is_nifti(path) {
        return read_stack(path);
    }
    let vol = read_nifti(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let (stack, _) = run_pipeline(&vol, pipeline)
        .map_err(|e| CliError::Pipeline(format!("patient {}: {e}", vol.patient_id)))?;
    Ok(stack)
}

pub struct Dataset {
    pub manifest: DatasetManifest,
    pub paths: Vec<PathBuf>,
}

pub fn open_manifest(path: &Path) -> CliResult<Dataset> {
    let manifest =
        load_manifest(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let paths = manifest.resolved(base);
    Ok(Dataset { manifest, paths })
}

/// Featurized slices of every manifest entry, in manifest order. The
/// manifest label overrides any label stored in a stack; slices of entry `i`
/// belong to patient group `i`.
pub fn load_examples(ds: &Dataset, pipeline: &PipelineConfig) -> CliResult<Vec<Example>> {
    let per_entry: Vec<CliResult<Vec<Example>>> = ds
        .paths
        .par_iter()
        .zip(ds.manifest.entries())
        .enumerate()
        .map(|(group, (path, entry))| {
            let stack = load_stack(path, pipeline)?;
            Ok(stack
                .slices()
                .iter()
                .map(|s| Example {
                    features: featurize(s),
                    label: entry.label.index(),
                    group,
                })
                .collect())
        })
        .collect();
    let mut out = Vec::new();
    for part in per_entry {
        out.extend(part?);
    }
    Ok(out)
}
