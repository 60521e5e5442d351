//! TOML experiment configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use zebra_core::ZebraConfig;

use crate::data::DataConfig;
use crate::error::{Result, TrainError};
use crate::network::Arch;
use crate::optim::OptimizerConfig;
use crate::pruning::PruneSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub model: Arch,
    pub epochs: usize,
    pub seed: u64,
    /// `false` builds the gate-free control model; `zebra` still supplies
    /// block size and bit width for reporting.
    #[serde(default = "default_true")]
    pub gated: bool,
    /// Bits per activation element for bandwidth accounting.
    #[serde(default = "default_bits")]
    pub bits: usize,
    pub data: DataConfig,
    pub zebra: ZebraConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub prune: Option<PruneSpec>,
}

fn default_true() -> bool {
    true
}

fn default_bits() -> usize {
    32
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            TrainError::Config(m) => TrainError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if !matches!(self.bits, 8 | 16 | 32) {
            return Err(TrainError::Config(format!("bits must be 8, 16 or 32, got {}", self.bits)));
        }
        self.zebra.validate()?;
        self.optimizer.validate()?;
        self.data.validate()?;
        if let Some(p) = &self.prune {
            p.validate()?;
        }
        Ok(())
    }

    /// A small synthetic-data config, handy for tests and smoke runs.
    pub fn quick(model: Arch, t_obj: f32, epochs: usize, seed: u64) -> Self {
        Self {
            name: format!("{}_t{t_obj}", model.name()),
            model,
            epochs,
            seed,
            gated: true,
            bits: 32,
            data: DataConfig::synthetic(512, 256, 16),
            zebra: ZebraConfig::hard(4, t_obj),
            optimizer: OptimizerConfig { initial_lr: 0.05, ..OptimizerConfig::default() },
            prune: None,
        }
    }
}
