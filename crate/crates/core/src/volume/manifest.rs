use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One dataset record. `path` is relative to the manifest file; `lesion_box`
/// is `[x0, y0, z0, x1, y1, z1]` with inclusive minima and exclusive maxima,
/// present only for synthetic lesion volumes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub label: u8,
    pub subject: String,
    pub fold: usize,
    #[serde(default)]
    pub lesion_box: Option<[usize; 6]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub k_folds: usize,
    pub entries: Vec<ManifestEntry>,
    /// Directory the entry paths are relative to; set on load, not stored.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::format("manifest", e.to_string()))?;
        manifest.root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::format("manifest", e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let mut class_seen = [false; 2];
        for e in &self.entries {
            if !seen.insert(e.path.as_str()) {
                return Err(Error::format(
                    "manifest",
                    format!("duplicate path {}", e.path),
                ));
            }
            if e.label > 1 {
                return Err(Error::format(
                    "manifest",
                    format!("label {} out of range for {}", e.label, e.path),
                ));
            }
            class_seen[e.label as usize] = true;
            if e.fold >= self.k_folds {
                return Err(Error::format(
                    "manifest",
                    format!("fold {} >= k_folds {} for {}", e.fold, self.k_folds, e.path),
                ));
            }
        }
        if self.entries.is_empty() || !class_seen[0] || !class_seen[1] {
            return Err(Error::format(
                "manifest",
                "need at least one entry per class",
            ));
        }
        Ok(())
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn class_indices(&self, label: u8) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label == label)
            .map(|(i, _)| i)
            .collect()
    }
}
