//! Run configuration: one TOML file with nested sections for the stream,
//! model, optimizer, losses, memory and trainer. Any section or key may be
//! omitted and falls back to its default; CLI flags override file values.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::memory::{AugmentPolicy, PerturbationPolicy};
use crate::nn::{ModelConfig, OptimizerState};
use crate::stream::StreamConfig;

/// Episodic memory sizing and maintenance switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryConfig {
    /// Maximum number of stored entries; zero disables the memory entirely.
    pub capacity: usize,
    /// Entries inserted per online update while capacity lasts.
    pub online_quota: usize,
    /// Entries surviving a periodic sweep.
    pub keep_size: usize,
    /// Re-capture stored logits from the current model at periodic sweeps.
    pub refresh_logits: bool,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            capacity: 1000,
            online_quota: 5,
            keep_size: 500,
            refresh_logits: true,
        }
    }
}

/// Loop-level settings of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    /// Stream examples per iteration.
    pub stream_batch: usize,
    /// Memory entries replayed per iteration.
    pub replay_batch: usize,
    /// Periodic memory sweep interval, in iterations.
    pub periodic_interval: u64,
    pub total_iterations: u64,
    /// Evaluation/checkpoint cadence, in iterations.
    pub checkpoint_every: u64,
    /// Holdout examples per class and task used for evaluation.
    pub holdout_per_class: usize,
    /// Apply both loss paths in one fused parameter update; when false, the
    /// metric-loss and classification-loss updates are applied as two
    /// sequential steps computed at the same pre-step parameters.
    pub fused_update: bool,
    /// Master seed for model init, replay sampling, augmentation and
    /// Monte-Carlo scoring; also mixed into the stream sampling seed.
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            stream_batch: 10,
            replay_batch: 6,
            periodic_interval: 1000,
            total_iterations: 4000,
            checkpoint_every: 250,
            holdout_per_class: 50,
            fused_update: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub stream: StreamConfig,
    pub model: ModelConfig,
    pub optimizer: OptimizerState,
    pub losses: LossConfig,
    pub memory: MemoryConfig,
    pub perturbation: PerturbationPolicy,
    pub augment: AugmentPolicy,
    pub trainer: TrainerConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.stream.resolved().map(|_| ())?;
        self.optimizer.validate()?;
        self.losses.validate()?;
        if self.trainer.periodic_interval == 0 {
            return Err(Error::Config("periodic_interval must be positive".into()));
        }
        if self.trainer.stream_batch == 0 {
            return Err(Error::Config("stream_batch must be positive".into()));
        }
        if self.memory.capacity > 0 {
            if self.trainer.replay_batch > self.memory.keep_size {
                return Err(Error::Config(format!(
                    "replay_batch {} exceeds keep_size {}",
                    self.trainer.replay_batch, self.memory.keep_size
                )));
            }
            if self.memory.keep_size > self.memory.capacity {
                return Err(Error::Config("keep_size exceeds capacity".into()));
            }
            if self.perturbation.passes == 0 {
                return Err(Error::Config("perturbation passes must be >= 1".into()));
            }
        }
        if self.model.input_dim != self.stream.feature_dim {
            return Err(Error::Config(format!(
                "model input_dim {} != stream feature_dim {}",
                self.model.input_dim, self.stream.feature_dim
            )));
        }
        if self.model.num_classes != self.stream.num_classes {
            return Err(Error::Config(format!(
                "model num_classes {} != stream num_classes {}",
                self.model.num_classes, self.stream.num_classes
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply a partial TOML document on top of this config: tables merge
    /// recursively, scalar and array values replace.
    pub fn with_overlay_str(&self, overlay: &str) -> Result<Self> {
        let mut base: toml::Value = toml::Value::try_from(self).map_err(Error::from)?;
        let patch: toml::Value = overlay.parse().map_err(|e: toml::de::Error| Error::from(e))?;
        merge_toml(&mut base, patch);
        let cfg: RunConfig = base.try_into().map_err(Error::from)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_overlay_file(&self, path: &Path) -> Result<Self> {
        self.with_overlay_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml_string()?.as_bytes());
        Ok(format!("{:x}", hasher.finalize()))
    }
}

fn merge_toml(base: &mut toml::Value, patch: toml::Value) {
    match (base, patch) {
        (toml::Value::Table(base_table), toml::Value::Table(patch_table)) => {
            for (key, value) in patch_table {
                match base_table.get_mut(&key) {
                    Some(slot) => merge_toml(slot, value),
                    None => {
                        base_table.insert(key, value);
                    }
                }
            }
        }
        (slot, value) => *slot = value,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string().unwrap();
        let parsed: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn overlay_merges_partially() {
        let cfg = RunConfig::default();
        let merged = cfg
            .with_overlay_str("[trainer]\ntotal_iterations = 77\n[losses]\nalpha_dml = 0.0\n")
            .unwrap();
        assert_eq!(merged.trainer.total_iterations, 77);
        assert_eq!(merged.losses.alpha_dml, 0.0);
        // Untouched values survive.
        assert_eq!(merged.trainer.stream_batch, 10);
        assert_eq!(merged.losses.beta_dml, 0.1);
    }

    #[test]
    fn overlay_rejects_unknown_keys() {
        let cfg = RunConfig::default();
        assert!(cfg.with_overlay_str("[trainer]\nnot_a_field = 3\n").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = a.with_overlay_str("[trainer]\nseed = 9\n").unwrap();
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap(), RunConfig::default().hash().unwrap());
    }

    #[test]
    fn cross_field_validation() {
        let cfg = RunConfig::default();
        assert!(cfg
            .with_overlay_str("[trainer]\nreplay_batch = 600\n")
            .is_err());
        assert!(cfg
            .with_overlay_str("[model]\ninput_dim = 12\n")
            .is_err());
    }
}
