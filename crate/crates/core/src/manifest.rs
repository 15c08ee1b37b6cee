//! `manifest.json`: one per output directory, written once the command has succeeded.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::train::write_atomic;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub parallel: bool,
    pub started_unix: f64,
    pub finished_unix: f64,
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl RunManifest {
    pub fn new(command: &str, started_unix: f64) -> Self {
        Self {
            command: command.to_string(),
            args: std::env::args().collect(),
            config: serde_json::Value::Null,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            parallel: crate::par::is_parallel(),
            started_unix,
            finished_unix: started_unix,
        }
    }

    /// Stamps the finish time and writes `dir/manifest.json` atomically.
    pub fn finish(mut self, dir: &Path) -> Result<()> {
        self.finished_unix = unix_now();
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&self)?.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?)
    }
}
