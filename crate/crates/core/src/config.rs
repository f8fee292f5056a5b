//! Experiment configuration file.
//!
//! A TOML document with the optional sections `[model]`, `[train]`,
//! `[batching]` and `[loss]`; missing keys take their defaults:
//!
//! ```toml
//! [train]
//! epochs = 30
//! lr_initial = 1e-3
//!
//! [batching]
//! n_negatives = 1
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::batching::BatchingConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub batching: BatchingConfig,
    pub loss: LossConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Seeds both weight initialization and batch sampling.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.batching.seed = seed;
    }

    /// Checks each section and their agreement on the input resolution.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.batching.validate()?;
        self.loss.validate()?;
        if self.model.resolution != self.batching.resolution {
            return Err(Error::Config(format!(
                "model resolution {} differs from batching resolution {}",
                self.model.resolution, self.batching.resolution
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg = ExperimentConfig::from_toml("[train]\nepochs = 7\n[loss]\nlambda_iou = 2.0\n").unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.loss.lambda_iou, 2.0);
        assert_eq!(cfg.loss.lambda_bce, 30.0);
        assert_eq!(cfg.model, ModelConfig::toy());
    }

    #[test]
    fn unknown_keys_and_mismatches_are_rejected() {
        assert!(ExperimentConfig::from_toml("[train]\nepoch = 7\n").is_err());
        let cfg = ExperimentConfig::from_toml("[batching]\nresolution = 32\n").unwrap();
        assert!(cfg.validate().is_err());
    }
}
