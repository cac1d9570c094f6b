//! Run manifests: one JSON file per run directory recording everything
//! needed to reproduce the run bit-for-bit under the determinism flag.

use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub command_line: Vec<String>,
    pub code_version: String,
    pub model: ModelConfig,
    /// Full training configuration including seed, masking split,
    /// optimizer constants and schedule.
    pub train: TrainConfig,
    /// Corpus identifier plus FNV-1a content hashes of every input file.
    pub corpus: String,
    pub data_hashes: Vec<(String, String)>,
    /// "greedy_pack": documents are streamed into CLS + content + SEP chunks.
    pub packing_policy: String,
    /// Per-layer partition schedule actually used (empty when no mask).
    pub partition_alpha: Vec<f64>,
    pub partition_beta: Vec<f64>,
    pub degenerate_partition_schedule: bool,
    /// RAB bucket boundaries actually used (empty unless the RAB variant).
    pub rab_boundaries: Vec<f64>,
    pub extra: Vec<(String, String)>,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)
            .map_err(|e| Error::Data(format!("manifest encode: {e}")))?;
        write_atomic(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path)
            .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_slice(&raw).map_err(|e| Error::Data(format!("manifest decode: {e}")))
    }
}

/// Write via a temp file in the same directory plus rename, so a killed run
/// never leaves a partial file behind.
pub fn write_atomic(path: &Path, content: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_else(|| "file".into()),
        std::process::id()
    ));
    std::fs::write(&tmp, content)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
