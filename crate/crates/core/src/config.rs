//! Experiment configuration: a TOML file with `[stream]`, `[encoder]` and
//! `[train]` tables. Missing keys take their defaults; unknown keys are
//! rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::EncoderConfig;
use crate::taskstream::StreamSpec;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub stream: StreamSpec,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and parses `path`; also returns the hex SHA-256 of its bytes.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let text = std::str::from_utf8(&bytes)
            .map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
        Ok((Self::from_toml(text)?, hex::encode(Sha256::digest(&bytes))))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.stream.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        let want = self.encoder.n_patches * self.encoder.patch_dim();
        if self.stream.dim != self.encoder.input_dim || want != self.stream.dim {
            return Err(Error::Config(format!(
                "stream dim {} does not match encoder input_dim {}",
                self.stream.dim, self.encoder.input_dim
            )));
        }
        Ok(())
    }

    /// One seed for the stream, the backbone and the trainer.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.stream.seed = seed;
        self.encoder.seed = seed;
        self.train.seed = seed;
        self
    }
}
