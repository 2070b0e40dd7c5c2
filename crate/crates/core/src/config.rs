//! Run configuration file: model layout, training schedule and data handling.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::phantoms::PreprocessConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Group-wise split ratio `train_parts : val_parts`.
    pub train_parts: usize,
    pub val_parts: usize,
    pub preprocess: PreprocessConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_parts: 4,
            val_parts: 1,
            preprocess: PreprocessConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk(32)
    }
}

impl RunConfig {
    /// CPU-sized model and schedule for `size x size` inputs.
    pub fn desk(size: usize) -> Self {
        Self {
            model: ModelConfig::desk(size),
            train: TrainConfig::desk(),
            data: DataConfig::default(),
        }
    }

    /// Full-size model with the reference training schedule.
    pub fn full_size() -> Self {
        Self {
            model: ModelConfig::full_size(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.train_parts == 0 || self.data.val_parts == 0 {
            return Err(Error::Config("data split parts must be >= 1".into()));
        }
        Ok(())
    }
}
