//! Run manifests: what went in, what came out, and when.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use timme_core::config::ExperimentConfig;

#[derive(Serialize)]
struct FileDigest {
    path: PathBuf,
    sha256: String,
}

#[derive(Serialize)]
pub struct Manifest {
    command: String,
    version: &'static str,
    config_sha256: String,
    seed: u64,
    mode: String,
    inputs: Vec<FileDigest>,
    artifacts: Vec<FileDigest>,
    started_unix: u64,
    finished_unix: Option<u64>,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn digest_file(path: &Path) -> Result<FileDigest> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

impl Manifest {
    pub fn start(command: &str, cfg: &ExperimentConfig, inputs: &[PathBuf]) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION"),
            config_sha256: hex::encode(Sha256::digest(cfg.to_conf_string().as_bytes())),
            seed: cfg.train.seed,
            mode: cfg.train.mode.to_string(),
            inputs: inputs.iter().map(|p| digest_file(p)).collect::<Result<_>>()?,
            artifacts: Vec::new(),
            started_unix: now(),
            finished_unix: None,
        })
    }

    pub fn artifact(&mut self, path: &Path) -> Result<()> {
        self.artifacts.push(digest_file(path)?);
        Ok(())
    }

    pub fn finish(mut self, path: &Path) -> Result<()> {
        self.finished_unix = Some(now());
        let text = serde_json::to_string_pretty(&self)? + "\n";
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}
