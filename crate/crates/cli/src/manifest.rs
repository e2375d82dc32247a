//! Provenance record written next to backtest outputs.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use ews_core::experiment::BacktestConfig;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::Failure;

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: &'static str,
    pub status: &'static str,
    pub seed: u64,
    pub config: BacktestConfig,
    pub inputs: Vec<InputDigest>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub outputs: Vec<PathBuf>,
    pub error: Option<String>,
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn digest_file(path: &Path) -> Result<InputDigest, Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::io(path, e))?;
    let hash = Sha256::digest(&bytes);
    Ok(InputDigest {
        path: path.to_path_buf(),
        sha256: hash.iter().map(|b| format!("{b:02x}")).collect(),
    })
}

impl RunManifest {
    pub fn start(config: &BacktestConfig, inputs: Vec<InputDigest>) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION"),
            status: "running",
            seed: config.seed,
            config: config.clone(),
            inputs,
            started_unix: now_unix(),
            finished_unix: None,
            outputs: Vec::new(),
            error: None,
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), Failure> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Failure::run(e.to_string()))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Failure::io(path, e))
    }

    pub fn finish(&mut self, outcome: Result<Vec<PathBuf>, String>) {
        self.finished_unix = Some(now_unix());
        match outcome {
            Ok(outputs) => {
                self.status = "complete";
                self.outputs = outputs;
            }
            Err(e) => {
                self.status = "failed";
                self.error = Some(e);
            }
        }
    }
}
