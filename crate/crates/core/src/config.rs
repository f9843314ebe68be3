//! Run configuration: one TOML file covering every stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::TrainConfig;
use crate::features::{FeatureConfig, WindowConfig};
use crate::model::ModelConfig;
use crate::preprocess::PreprocessConfig;
use crate::synthgen::GeneratorConfig;
use crate::util::short_hash;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Train, validation and test shares of the activity segments.
    pub ratios: [f64; 3],
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { ratios: [0.65, 0.15, 0.2] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    /// Run smoothing and outlier interpolation before feature extraction.
    pub apply_cleaning: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seed: 42, apply_cleaning: true }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub generator: GeneratorConfig,
    pub preprocess: PreprocessConfig,
    pub features: FeatureConfig,
    pub windows: WindowConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.window != self.windows.length {
            return Err(Error::Config(format!(
                "model.window ({}) must equal windows.length ({})",
                self.model.window, self.windows.length
            )));
        }
        if self.features.rolling_window < 2 || self.features.trend_smoothing == 0 {
            return Err(Error::Config("features: rolling_window >= 2 and trend_smoothing >= 1 required".into()));
        }
        let r = self.split.ratios;
        if r.iter().any(|x| *x < 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split.ratios {r:?} must be non-negative and sum to 1")));
        }
        Ok(())
    }

    /// Stable identifier of the configuration, independent of TOML layout.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        short_hash(&json)
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.run.seed = s;
        }
        self
    }
}
