//! Serializable run configuration with strict (unknown-key rejecting) parsing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::deblur::DeblurConfig;
use crate::error::{Error, Result};
use crate::kernel_space::ArchConfig;
use crate::nn::OptimizerConfig;
use crate::objectives::PriorWeights;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunPaths {
    pub data: Option<String>,
    pub out: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub weights: PriorWeights,
    pub optimizer: OptimizerConfig,
    pub deblur: DeblurConfig,
    pub seed: u64,
    /// Photometric augmentation of training pairs.
    pub augment: bool,
    pub paths: RunPaths,
    /// Save a checkpoint every this many training iterations (and at the end).
    pub checkpoint_every: u64,
    /// Worker threads; recorded so runs are reproducible.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::default(),
            weights: PriorWeights::default(),
            optimizer: OptimizerConfig::default(),
            deblur: DeblurConfig::default(),
            seed: 0,
            augment: false,
            paths: RunPaths::default(),
            checkpoint_every: 100,
            threads: 1,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.weights.validate()?;
        self.optimizer.validate()?;
        self.deblur.validate()?;
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}
