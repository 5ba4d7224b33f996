use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Record of one invocation, written next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub args: Vec<String>,
    pub config: RunConfig,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<String>,
    pub timings: BTreeMap<String, f64>,
    pub exit_code: i32,
    pub notes: BTreeMap<String, serde_json::Value>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Collects inputs, outputs and timings while a command runs.
pub struct ManifestBuilder {
    manifest: RunManifest,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            manifest: RunManifest {
                command: command.into(),
                tool_version: env!("CARGO_PKG_VERSION").into(),
                args: std::env::args().collect(),
                config: config.clone(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                timings: BTreeMap::new(),
                exit_code: 0,
                notes: BTreeMap::new(),
            },
            started: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let sha256 = sha256_file(path)?;
        self.manifest.inputs.push(FileDigest { path: path.display().to_string(), sha256 });
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.manifest.outputs.push(path.display().to_string());
    }

    pub fn timing(&mut self, key: &str, seconds: f64) {
        self.manifest.timings.insert(key.into(), seconds);
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) {
        if let Ok(v) = serde_json::to_value(value) {
            self.manifest.notes.insert(key.into(), v);
        }
    }

    /// Write `manifest.json` into `dir` and return the manifest.
    pub fn finish(mut self, dir: &Path, exit_code: i32) -> Result<RunManifest, CliError> {
        self.manifest.exit_code = exit_code;
        self.manifest.timings.insert("total_s".into(), self.started.elapsed().as_secs_f64());
        let path: PathBuf = dir.join(MANIFEST_FILE);
        ddnfl::io::write_json(&path, &self.manifest)?;
        Ok(self.manifest)
    }
}
