//! Run configuration file: JSON mirroring the train and model configs.
//!
//! Both sections and all fields are optional; missing values fall back to
//! the built-in defaults, so `{"train": {"epochs": 2}}` is a valid config.

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use ssir_core::model::ModelConfig;
use ssir_core::trainer::TrainConfig;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "ModelConfig::default")]
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
