//! One TOML file with a section per component; every key is optional.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::degradation::LevelThresholds;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TrainConfig};
use crate::sampler::SamplerConfig;
use crate::scene::DatasetConfig;
use crate::vq::VQConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodebookTraining {
    pub iters: usize,
}

impl Default for CodebookTraining {
    fn default() -> Self {
        Self { iters: 20 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub vq: VQConfig,
    pub codebook: CodebookTraining,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub thresholds: LevelThresholds,
}

impl AppConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: AppConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks every section except the model's vocabulary size, which is only
    /// known once the codebook exists.
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.vq.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        ModelConfig { vocab_size: 1, ..self.model.clone() }.validate()?;
        if self.dataset.image_size % self.vq.f != 0 {
            return Err(Error::Config("dataset.image_size must be divisible by vq.f".into()));
        }
        Ok(())
    }
}
