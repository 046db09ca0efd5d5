//! TOML run configuration. Every key is optional; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::connector::{ConnectorDims, ProbeConfig};
use crate::encoders::{StateDims, TextDims};
use crate::error::{ClspError, Result};
use crate::state::GeneratorConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n: usize,
    pub seed: u64,
    pub test_fraction: f64,
    /// Seed of the train/test split.
    pub split_seed: u64,
    pub generator: GeneratorConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n: 50_000,
            seed: 42,
            test_fraction: 0.05,
            split_seed: 7,
            generator: GeneratorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchemaConfig {
    pub rff_seed: u64,
    pub sigma: f64,
}

impl Default for SchemaConfig {
    fn default() -> Self {
        Self { rff_seed: 5, sigma: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 3 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub state: StateDims,
    pub text: TextDims,
    pub connector: ConnectorDims,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub schema: SchemaConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ClspError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ClspError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.generator.validate()?;
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return Err(ClspError::Config("data.test_fraction must be in (0, 1)".into()));
        }
        if self.pretrain.epochs == 0 {
            return Err(ClspError::Config("pretrain.epochs must be >= 1".into()));
        }
        if self.model.connector.d != self.model.state.embed {
            return Err(ClspError::Config("model.connector.d must equal model.state.embed".into()));
        }
        if self.model.text.embed != self.model.state.embed {
            return Err(ClspError::Config("text and state embedding widths differ".into()));
        }
        self.train.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serializes")
    }
}
