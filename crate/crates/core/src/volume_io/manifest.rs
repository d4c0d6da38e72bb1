use super::Severity;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("malformed manifest line {0}")]
    MalformedLine(usize),
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("cannot read manifest: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: Severity,
}

/// Ordered list of labelled volumes with per-class tallies.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    entries: Vec<ManifestEntry>,
    class_counts: [usize; Severity::COUNT],
}

impl DatasetManifest {
    pub fn from_entries(entries: Vec<ManifestEntry>) -> Self {
        let mut class_counts = [0; Severity::COUNT];
        for e in &entries {
            class_counts[e.label.index()] += 1;
        }
        Self {
            entries,
            class_counts,
        }
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn class_counts(&self) -> [usize; Severity::COUNT] {
        self.class_counts
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Class indices in entry order.
    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label.index()).collect()
    }

    /// Joins relative entry paths onto `base`.
    pub fn resolved(&self, base: &Path) -> Vec<PathBuf> {
        self.entries.iter().map(|e| base.join(&e.path)).collect()
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{},{}\n", e.path.display(), e.label))
            .collect()
    }
}

/// Parses `path,LABEL` lines. Blank lines and `#` comments are skipped; line
/// numbers in errors are 1-based.
pub fn parse_manifest(text: &str) -> Result<DatasetManifest, ManifestError> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (path, label) = line
            .rsplit_once(',')
            .ok_or(ManifestError::MalformedLine(i + 1))?;
        let (path, label) = (path.trim(), label.trim());
        if path.is_empty() || label.is_empty() {
            return Err(ManifestError::MalformedLine(i + 1));
        }
        let label = label
            .parse::<Severity>()
            .map_err(|e| ManifestError::UnknownLabel(e.0))?;
        entries.push(ManifestEntry {
            path: PathBuf::from(path),
            label,
        });
    }
    Ok(DatasetManifest::from_entries(entries))
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, ManifestError> {
    parse_manifest(&std::fs::read_to_string(path)?)
}
