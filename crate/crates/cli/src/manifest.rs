//! Run manifests: one JSON record written next to each command's outputs,
//! capturing everything needed to reproduce the run.

use anyhow::{Context, Result};
use chrono::{DateTime, Utc};
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub artifacts: Vec<String>,
    pub tool_version: String,
    pub started_at: String,
    pub finished_at: String,
}

pub struct RunTracker {
    command: String,
    config: serde_json::Value,
    seed: u64,
    started_at: DateTime<Utc>,
    artifacts: Vec<PathBuf>,
}

impl RunTracker {
    pub fn start(command: &str, config: serde_json::Value, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config,
            seed,
            started_at: Utc::now(),
            artifacts: Vec::new(),
        }
    }

    pub fn add_artifact(&mut self, path: &Path) {
        self.artifacts.push(path.to_path_buf());
    }

    /// Writes the manifest to `path` and registers it as an artifact of the
    /// run itself.
    pub fn finish(self, path: &Path) -> Result<()> {
        let manifest = RunManifest {
            command: self.command,
            config: self.config,
            seed: self.seed,
            artifacts: self
                .artifacts
                .iter()
                .map(|p| p.display().to_string())
                .collect(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: self.started_at.to_rfc3339(),
            finished_at: Utc::now().to_rfc3339(),
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
