//! Run manifests written next to every output artifact.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub tool_version: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn hashes(paths: &[PathBuf]) -> Result<Vec<FileHash>> {
    paths.iter().map(|p| Ok(FileHash { path: p.display().to_string(), sha256: sha256_file(p)? })).collect()
}

pub fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

/// `<path>.manifest.json`
pub fn manifest_path(primary: &Path) -> PathBuf {
    let mut s = primary.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub struct Recorder {
    command: &'static str,
    started: u128,
    inputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn start(command: &'static str, inputs: &[&Path]) -> Self {
        Self { command, started: now_ms(), inputs: inputs.iter().map(|p| p.to_path_buf()).collect() }
    }

    /// Hashes inputs and outputs and writes the manifest to `at`.
    pub fn finish(self, at: &Path, config: Value, seed: Option<u64>, outputs: &[&Path]) -> Result<()> {
        let outputs: Vec<PathBuf> = outputs.iter().map(|p| p.to_path_buf()).collect();
        let manifest = RunManifest {
            command: self.command.to_string(),
            config,
            seed,
            inputs: hashes(&self.inputs)?,
            outputs: hashes(&outputs)?,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix_ms: self.started,
            finished_unix_ms: now_ms(),
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(at, text).with_context(|| format!("writing {}", at.display()))?;
        Ok(())
    }
}
