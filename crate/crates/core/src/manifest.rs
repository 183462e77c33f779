//! Run manifests: the fully resolved configuration, input/output digests and
//! timestamps for every command. A manifest pins everything needed to
//! reproduce a run's outputs byte-exactly (timestamps are informational and
//! excluded from that contract).

use crate::checkpoint::write_atomic;
use crate::error::Result;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub config_digest: String,
    pub seed: u64,
    pub dataset_digests: BTreeMap<String, String>,
    pub input_digests: BTreeMap<String, String>,
    pub output_digests: BTreeMap<String, String>,
    pub started_at: String,
    pub finished_at: String,
    /// Non-fatal notes (excluded attributes, skipped cells, ...).
    pub notes: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &crate::config::TrainConfig) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config: cfg.resolved(),
            config_digest: cfg.digest(),
            seed: cfg.seed,
            dataset_digests: BTreeMap::new(),
            input_digests: BTreeMap::new(),
            output_digests: BTreeMap::new(),
            started_at: chrono::Utc::now().to_rfc3339(),
            finished_at: String::new(),
            notes: Vec::new(),
        }
    }

    pub fn finish(&mut self) {
        self.finished_at = chrono::Utc::now().to_rfc3339();
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// True when every recorded output file still exists with its recorded
    /// digest; the basis for sweep resume.
    pub fn outputs_verify(&self, dir: &Path) -> bool {
        self.output_digests.iter().all(|(name, digest)| {
            crate::checkpoint::file_digest(&dir.join(name))
                .map(|d| &d == digest)
                .unwrap_or(false)
        })
    }
}
