//! Everything needed to regenerate a run: the resolved config, hashes of
//! its inputs, and where its outputs went.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::CliError;

pub const MANIFEST_VERSION: u32 = 1;

/// Hash of the source tree the binary was built from.
pub const CODE_HASH: &str = env!("CKD_CODE_HASH");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub domain: String,
    pub path: PathBuf,
    pub param_hash: String,
    #[serde(default)]
    pub malicious: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub started_unix: u64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub code_hash: String,
    pub config: ExperimentConfig,
    pub vocab_hash: String,
    /// `"<domain>/<role>"` to SHA-256 of the corpus file.
    pub corpora: BTreeMap<String, String>,
    pub student0: CheckpointRecord,
    pub teachers: Vec<CheckpointRecord>,
    pub history: PathBuf,
    /// `step_<t>.ckpt`, step 0 first.
    pub checkpoints: Vec<PathBuf>,
    pub timing: Timing,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Data(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
        let m: RunManifest = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if m.version != MANIFEST_VERSION {
            return Err(CliError::Data(format!("manifest version {} (expected {MANIFEST_VERSION})", m.version)));
        }
        Ok(m)
    }
}
