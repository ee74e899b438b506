//! Experiment configuration files.
//!
//! The primary encoding is TOML; a file ending in `.json` is read as JSON
//! with the same structure. Every field has a default, so an empty file is
//! a valid configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use s5cl::dataset::{SplitSpec, SyntheticParams};
use s5cl::trainer::{TrainConfig, TrainMode};

use crate::CliError;

/// Where the images come from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// An S5DS file; when unset the synthetic generator is used.
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    /// Augmented copies per policy (weak and strong) in the embedding export.
    pub augmented_views: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            dataset: None,
            augmented_views: 1,
        }
    }
}

/// List-valued fields; the sweep runs their cartesian product.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub modes: Option<Vec<TrainMode>>,
    pub seeds: Option<Vec<u64>>,
    pub temperature_labeled: Option<Vec<f64>>,
    pub temperature_unlabeled: Option<Vec<f64>>,
    pub max_runs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            modes: None,
            seeds: None,
            temperature_labeled: None,
            temperature_unlabeled: None,
            max_runs: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Drives data generation, splitting and training alike.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub split: SplitSpec,
    pub train: TrainConfig,
    pub evaluate: EvaluateConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            dataset: DatasetConfig::default(),
            split: SplitSpec::default(),
            train: TrainConfig::default(),
            evaluate: EvaluateConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str, json: bool) -> Result<Self, CliError> {
        let cfg = if json {
            serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?
        };
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let json = path.extension().is_some_and(|e| e == "json");
        Self::parse(&text, json)
    }

    /// Copies the top-level seed into every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.dataset.synthetic.seed = seed;
        self.split.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Seeds propagated and sub-configurations validated.
    pub fn effective(self) -> Result<Self, CliError> {
        let seed = self.seed;
        let cfg = self.with_seed(seed);
        cfg.split.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }
}
