//! Run manifests recorded next to every artifact.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::CODE_VERSION;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Inputs and outputs of one command invocation. Only the timestamps
/// differ between reruns with identical inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub code_version: String,
    /// Paths relative to the manifest's directory.
    pub outputs: Vec<String>,
    pub started_at: String,
    pub finished_at: String,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn start(command: &str, config: &impl Serialize, seed: Option<u64>) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            seed,
            code_version: CODE_VERSION.to_string(),
            outputs: Vec::new(),
            started_at: now(),
            finished_at: String::new(),
        })
    }

    /// Stamps the finish time and writes `manifest.json` into `dir`.
    pub fn finish(mut self, dir: &Path, outputs: &[PathBuf]) -> Result<()> {
        self.outputs = outputs
            .iter()
            .map(|p| p.strip_prefix(dir).unwrap_or(p).to_string_lossy().replace('\\', "/"))
            .collect();
        self.outputs.sort();
        self.finished_at = now();
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&self)?)
            .with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}
