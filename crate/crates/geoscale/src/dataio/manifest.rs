//! The run manifest: resolved config snapshot, input hashes, and tool
//! version, written before any other output. The manifest fully determines
//! the pipeline outputs; nothing time- or host-dependent is recorded.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputHash {
    pub path: String,
    /// Hex SHA-256 of the file bytes; None when the file was missing at
    /// manifest time (the run then fails right after writing the manifest).
    pub sha256: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_name: String,
    pub tool_version: String,
    /// PRNG identity, for cross-platform bit reproducibility.
    pub prng: String,
    pub seed: u64,
    pub overrides: Vec<String>,
    pub inputs: Vec<InputHash>,
    pub config: serde_json::Value,
}

impl Manifest {
    pub fn new(config_echo: serde_json::Value, seed: u64, overrides: Vec<String>) -> Self {
        Self {
            tool_name: "geoscale".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            prng: "chacha8".into(),
            seed,
            overrides,
            inputs: Vec::new(),
            config: config_echo,
        }
    }

    /// Hash an input file into the manifest; missing files are recorded with
    /// a null hash so the manifest still lands on disk before the run fails.
    pub fn add_input(&mut self, path: &Path) {
        let sha = std::fs::read(path).ok().map(|b| super::sha256_hex(&b));
        self.inputs.push(InputHash {
            path: path.display().to_string(),
            sha256: sha,
        });
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let path = out_dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("manifest serialization");
        std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }
}
