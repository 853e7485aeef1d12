//! Run configuration: one JSON document mirroring every command-line flag.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fast_core::model::ModelConfig;
use fast_core::pretrain::PretrainConfig;
use fast_core::stamp::EditConfig;
use serde::{Deserialize, Serialize};

/// Settings for the layer and hidden-dimension sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    /// `None` sweeps every layer.
    pub layers: Option<Vec<usize>>,
    pub dims: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            layers: None,
            dims: vec![16, 64, 256],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus_spec: PathBuf,
    /// `vocab_size` is replaced by the tokenizer size at training time.
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub edit: EditConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            corpus_spec: PathBuf::from("data/demo/corpus_spec.json"),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            edit: EditConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        // Relative paths inside a config file are relative to that file.
        if cfg.corpus_spec.is_relative() {
            if let Some(dir) = path.parent() {
                let local = dir.join(&cfg.corpus_spec);
                if local.exists() {
                    cfg.corpus_spec = local;
                }
            }
        }
        Ok(cfg)
    }

    /// `--seed` feeds every stage that draws randomness.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.pretrain.seed = seed;
        self.edit.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate()?;
        self.edit.validate()?;
        if self.sweep.dims.contains(&0) {
            anyhow::bail!("sweep dims must be >= 1");
        }
        Ok(())
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("config.resolved.json"), self)
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
