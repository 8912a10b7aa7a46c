use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sparse_tune::transfer::RunDir;

use crate::error::CliError;

/// Record of one command invocation, written to `manifests/<name>.json`.
///
/// Paths are relative to the run directory when they lie inside it, so two
/// run directories produced from the same inputs have equal manifests apart
/// from `wall_clock_seconds`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    /// Path to SHA-256 of every file read.
    pub inputs: BTreeMap<String, String>,
    /// Path to SHA-256 of every file written.
    pub outputs: BTreeMap<String, String>,
    pub wall_clock_seconds: f64,
    pub metrics: BTreeMap<String, f64>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Collects inputs and outputs while a command runs.
pub struct Recorder {
    run: RunDir,
    command: String,
    started: Instant,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, f64>,
    pub seeds: Vec<u64>,
}

impl Recorder {
    pub fn new(run: &RunDir, command: &str) -> Self {
        Recorder {
            run: run.clone(),
            command: command.to_string(),
            started: Instant::now(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            metrics: BTreeMap::new(),
            seeds: Vec::new(),
        }
    }

    fn key(&self, path: &Path) -> String {
        path.strip_prefix(self.run.root())
            .unwrap_or(path)
            .display()
            .to_string()
    }

    /// Reads `path`, recording its digest.
    pub fn read(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        self.inputs.insert(self.key(path), sha256_hex(&bytes));
        Ok(bytes)
    }

    /// Records an input some library call already read.
    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.read(path).map(drop)
    }

    /// Writes `bytes` atomically, recording its digest.
    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
        self.run.write(path, bytes)?;
        self.outputs.insert(self.key(path), sha256_hex(bytes));
        Ok(())
    }

    /// Records an output some library call already wrote.
    pub fn output(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        self.outputs.insert(self.key(path), sha256_hex(&bytes));
        Ok(())
    }

    /// Writes the manifest as `manifests/<name>.json` and returns its path.
    pub fn finish<C: Serialize>(self, name: &str, config: &C) -> Result<PathBuf, CliError> {
        let path = self.run.manifest(name);
        let manifest = RunManifest {
            command: self.command,
            config: serde_json::to_value(config).map_err(|e| CliError::Failed(e.to_string()))?,
            seeds: self.seeds,
            inputs: self.inputs,
            outputs: self.outputs,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            metrics: self.metrics,
        };
        let text =
            serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Failed(e.to_string()))?;
        self.run.write(&path, format!("{text}\n").as_bytes())?;
        Ok(path)
    }
}
