//! Run manifests: enough to reproduce any artifact exactly — the resolved
//! configuration, the seed, and content hashes of every input.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use signbt_core::container::file_sha256;

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    pub resolved_config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub duration_seconds: f64,
}

pub struct ManifestBuilder {
    command: String,
    seed: u64,
    config: serde_json::Value,
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            seed,
            config,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let hash = file_sha256(path)
            .with_context(|| format!("hashing input {}", path.display()))?;
        self.inputs.insert(path.display().to_string(), hash);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Writes `<command>.manifest.json` into the report directory.
    pub fn write(self, report_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(report_dir)?;
        let config_hash =
            signbt_core::container::sha256_hex(self.config.to_string().as_bytes());
        let manifest = RunManifest {
            command: self.command.clone(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.seed,
            config_hash,
            resolved_config: self.config,
            inputs: self.inputs,
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
            duration_seconds: self.started.elapsed().as_secs_f64(),
        };
        let path = report_dir.join(format!("{}.manifest.json", self.command));
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
            .with_context(|| format!("writing manifest {}", path.display()))?;
        Ok(())
    }
}
