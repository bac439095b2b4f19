//! Run configuration: one TOML file with a version key and a strict schema.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::NeighborWeight;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default = "defaults::seed")]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub labeling: LabelingConfig,
    #[serde(default)]
    pub memory: MemoryConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub height: usize,
    pub width: usize,
    pub source_scenes: usize,
    pub target_scenes: usize,
    pub source_identities: usize,
    pub target_identities: usize,
    pub min_persons: usize,
    pub max_persons: usize,
    /// 0 keeps the target generator identical to the source one; 1 applies the full shift.
    pub domain_shift: f64,
    pub background_proposals: usize,
    /// Relative box jitter of person proposals.
    pub jitter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub channels: usize,
    pub embed_dim: usize,
    pub attention_branches: usize,
    pub domain_hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelingConfig {
    pub n_random: usize,
    /// Relabel every this many adaptation epochs.
    pub relabel_every: usize,
    pub score_threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryConfig {
    pub tau: f64,
    pub momentum: f64,
    pub neighbor_threshold: f64,
    pub neighbor_weight: NeighborWeight,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub adapt_epochs: usize,
    pub consistency_weight: f64,
    pub image_alignment_weight: f64,
}

mod defaults {
    pub fn seed() -> u64 {
        7
    }
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            height: 96,
            width: 160,
            source_scenes: 200,
            target_scenes: 200,
            source_identities: 30,
            target_identities: 30,
            min_persons: 1,
            max_persons: 3,
            domain_shift: 1.0,
            background_proposals: 3,
            jitter: 0.08,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { channels: 32, embed_dim: 64, attention_branches: 1, domain_hidden: 32 }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 0.003, momentum: 0.9, weight_decay: 5e-4, batch_size: 4 }
    }
}

impl Default for LabelingConfig {
    fn default() -> Self {
        Self { n_random: 60, relabel_every: 1, score_threshold: 0.5 }
    }
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self { tau: 0.05, momentum: 0.2, neighbor_threshold: 0.4, neighbor_weight: NeighborWeight::Normalized }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { pretrain_epochs: 3, adapt_epochs: 5, consistency_weight: 0.1, image_alignment_weight: 1.0 }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: defaults::seed(),
            out_dir: None,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            labeling: LabelingConfig::default(),
            memory: MemoryConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn range<T: PartialOrd + std::fmt::Display>(key: &str, v: T, lo: T, hi: T) -> Result<()> {
    if v < lo || v > hi {
        return Err(Error::Config(format!("{key} = {v} outside [{lo}, {hi}]")));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("version = {} unsupported (expected {CONFIG_VERSION})", self.version)));
        }
        let d = &self.dataset;
        range("dataset.height", d.height, 32, 1024)?;
        range("dataset.width", d.width, 32, 1024)?;
        range("dataset.source_scenes", d.source_scenes, 1, 100_000)?;
        range("dataset.target_scenes", d.target_scenes, 0, 100_000)?;
        range("dataset.source_identities", d.source_identities, 1, 100_000)?;
        range("dataset.target_identities", d.target_identities, 1, 100_000)?;
        range("dataset.min_persons", d.min_persons, 1, 64)?;
        range("dataset.max_persons", d.max_persons, d.min_persons, 64)?;
        range("dataset.domain_shift", d.domain_shift, 0.0, 1.0)?;
        range("dataset.background_proposals", d.background_proposals, 0, 64)?;
        range("dataset.jitter", d.jitter, 0.0, 0.2)?;
        let m = &self.model;
        range("model.channels", m.channels, 2, 256)?;
        range("model.embed_dim", m.embed_dim, 2, 1024)?;
        range("model.attention_branches", m.attention_branches, 1, m.channels)?;
        if m.channels % m.attention_branches != 0 {
            return Err(Error::Config(format!(
                "model.attention_branches = {} must divide model.channels = {}",
                m.attention_branches, m.channels
            )));
        }
        range("model.domain_hidden", m.domain_hidden, 1, 1024)?;
        let o = &self.optim;
        range("optim.lr", o.lr, 0.0, 1.0)?;
        range("optim.momentum", o.momentum, 0.0, 0.999)?;
        range("optim.weight_decay", o.weight_decay, 0.0, 0.1)?;
        range("optim.batch_size", o.batch_size, 1, 256)?;
        let l = &self.labeling;
        range("labeling.n_random", l.n_random, 1, 1_000_000)?;
        range("labeling.relabel_every", l.relabel_every, 1, 1000)?;
        range("labeling.score_threshold", l.score_threshold, 0.0, 1.0)?;
        let mem = &self.memory;
        range("memory.tau", mem.tau, 1e-4, 10.0)?;
        range("memory.momentum", mem.momentum, 0.0, 0.999)?;
        range("memory.neighbor_threshold", mem.neighbor_threshold, 0.0, 2.0)?;
        let t = &self.train;
        range("train.pretrain_epochs", t.pretrain_epochs, 0, 1000)?;
        range("train.adapt_epochs", t.adapt_epochs, 0, 1000)?;
        range("train.consistency_weight", t.consistency_weight, 0.0, 100.0)?;
        range("train.image_alignment_weight", t.image_alignment_weight, 0.0, 100.0)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_field_equal() {
        let mut cfg = RunConfig::default();
        cfg.seed = 99;
        cfg.memory.tau = 0.07;
        cfg.out_dir = Some("runs/x".into());
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml("version = 1\n[optim]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn out_of_range_is_named() {
        let err = RunConfig::from_toml("version = 1\n[memory]\ntau = 0.0\n").unwrap_err();
        assert!(err.to_string().contains("memory.tau"), "{err}");
        let err = RunConfig::from_toml("version = 2\n").unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn defaults_carry_optimizer_settings() {
        let cfg = RunConfig::from_toml("version = 1\n").unwrap();
        assert_eq!(cfg.optim.lr, 0.003);
        assert_eq!(cfg.optim.momentum, 0.9);
        assert_eq!(cfg.optim.weight_decay, 5e-4);
        assert_eq!(cfg.optim.batch_size, 4);
    }
}
