//! Experiment configuration files.
//!
//! One TOML file describes a whole experiment. Relative paths are resolved
//! against the directory containing the file, so a config and its data can
//! move together.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dsae_core::eval::EvalOptions;
use dsae_core::synthdata::FactorSpec;
use dsae_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    pub val: PathBuf,
    #[serde(default = "default_n_sequences")]
    pub n_sequences: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub spec: FactorSpec,
}

fn default_n_sequences() -> usize {
    640
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Random draws per operation.
    pub trials: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig { seed: 0, trials: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalOptions,
    #[serde(default)]
    pub gradcheck: GradcheckConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text)?;
        for p in [&mut cfg.output_dir, &mut cfg.data.train, &mut cfg.data.val] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.data.spec.validate()?;
        cfg.train.validate()?;
        if cfg.train.model.d_input != cfg.data.spec.d_bins {
            anyhow::bail!(
                "train.model.d_input = {} but data.spec.d_bins = {}",
                cfg.train.model.d_input,
                cfg.data.spec.d_bins
            );
        }
        if cfg.train.model.seq_len != cfg.data.spec.seq_len() {
            anyhow::bail!(
                "train.model.seq_len = {} but the data has {} frames",
                cfg.train.model.seq_len,
                cfg.data.spec.seq_len()
            );
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).with_context(|| format!("in config {}", path.display()))
    }
}
