//! Training configuration: a single TOML file carrying every
//! hyperparameter for both training stages plus the embedded model and
//! dataset settings.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DataConfig;
use crate::model::ModelConfig;

/// Errors from loading or validating a config file.
#[derive(Debug, Error)]
pub enum ConfigError {
    /// Filesystem failure.
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    /// Malformed TOML.
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    /// TOML serialization failure.
    #[error("config encode: {0}")]
    Encode(#[from] toml::ser::Error),
    /// A value or combination of values is out of range.
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Numeric precision the trainer runs in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Single precision: the training default.
    #[default]
    F32,
    /// Double precision: used by gradient checks and oracle comparisons.
    F64,
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("unknown precision {other:?} (expected f32 or f64)")),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

/// Optimizer settings (AdamW with cosine learning-rate decay).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    /// Peak learning rate.
    pub lr: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    /// First-moment decay.
    pub beta1: f64,
    /// Second-moment decay.
    pub beta2: f64,
    /// Denominator stabilizer.
    pub eps: f64,
    /// Cosine-decay floor as a fraction of the peak rate.
    pub min_lr_frac: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-4,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            min_lr_frac: 0.0,
        }
    }
}

impl OptimConfig {
    /// Cosine-decayed learning rate at `step` of `total` steps.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        if total == 0 {
            return self.lr;
        }
        let progress = (step.min(total) as f64) / total as f64;
        let floor = self.lr * self.min_lr_frac;
        floor + 0.5 * (self.lr - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Full training configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Stage-1 (assembly + autoencoder warm-up) step count.
    pub stage1_steps: u64,
    /// Stage-2 (joint) step count.
    pub stage2_steps: u64,
    /// Stage-1 batch size.
    pub stage1_batch: usize,
    /// Stage-2 batch size.
    pub stage2_batch: usize,
    /// Weight on the generation flow loss in stage 2.
    pub lambda_gen: f64,
    /// Condition-drop probability at the start of stage 2.
    pub drop_start: f64,
    /// Condition-drop probability at the end of stage 2.
    pub drop_end: f64,
    /// Probability of the training-time missing-part augmentation
    /// (never drops a sample below two observed fragments).
    pub missing_prob: f64,
    /// Fraction of observed parts removed when the augmentation fires.
    pub missing_fraction: f64,
    /// Keep autoencoder weights fixed during stage 2.
    pub freeze_vae_stage2: bool,
    /// Keep generation-branch weights fixed during stage 2 (adapters stay
    /// trainable either way).
    pub freeze_generation_stage2: bool,
    /// SDF query points per sample for the reconstruction loss.
    pub sdf_queries: usize,
    /// Total fragment-point budget shared across a sample's fragments.
    pub fragment_budget: usize,
    /// Numeric precision for training.
    pub precision: Precision,
    /// Master seed; every stochastic choice derives from it.
    pub seed: u64,
    /// Steps between checkpoint writes (also written at stage end).
    pub checkpoint_every: u64,
    /// Steps between metric records.
    pub log_every: u64,
    /// Training archive path.
    pub data_path: PathBuf,
    /// Output directory for checkpoints and metrics.
    pub out_dir: PathBuf,
    /// Optimizer settings.
    pub optim: OptimConfig,
    /// Model architecture.
    pub model: ModelConfig,
    /// Dataset generation settings (recorded for provenance; training reads
    /// the archive at `data_path`).
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_steps: 5_000,
            stage2_steps: 7_500,
            stage1_batch: 16,
            stage2_batch: 8,
            lambda_gen: 1.0,
            drop_start: 0.10,
            drop_end: 0.50,
            missing_prob: 0.3,
            missing_fraction: 0.34,
            freeze_vae_stage2: true,
            freeze_generation_stage2: false,
            sdf_queries: 512,
            fragment_budget: 1024,
            precision: Precision::F32,
            seed: 0,
            checkpoint_every: 1_000,
            log_every: 50,
            data_path: PathBuf::from("data/train.rfds"),
            out_dir: PathBuf::from("runs/default"),
            optim: OptimConfig::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Parse a TOML config file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: TrainConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serialize to TOML.
    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Condition-drop probability after `step` of `total` stage-2 steps:
    /// linear ramp from `drop_start` to `drop_end`.
    pub fn drop_rate_at(&self, step: u64, total: u64) -> f64 {
        if total == 0 {
            return self.drop_end;
        }
        let progress = (step.min(total) as f64) / total as f64;
        self.drop_start + (self.drop_end - self.drop_start) * progress
    }

    /// Check value ranges and cross-field consistency.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        if self.stage1_steps == 0 && self.stage2_steps == 0 {
            return fail("at least one stage needs steps > 0".into());
        }
        if self.stage1_batch == 0 || self.stage2_batch == 0 {
            return fail("batch sizes must be >= 1".into());
        }
        if !(self.optim.lr > 0.0 && self.optim.lr.is_finite()) {
            // lr == 0 is still reachable for the bitwise no-op test via the
            // struct literal; the file format rejects it as a footgun.
            return fail(format!("lr must be positive, got {}", self.optim.lr));
        }
        if !(0.0..1.0).contains(&self.optim.beta1) || !(0.0..1.0).contains(&self.optim.beta2) {
            return fail("adam betas must lie in [0, 1)".into());
        }
        for (name, v) in [
            ("drop_start", self.drop_start),
            ("drop_end", self.drop_end),
            ("missing_prob", self.missing_prob),
            ("missing_fraction", self.missing_fraction),
            ("min_lr_frac", self.optim.min_lr_frac),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.drop_end < self.drop_start {
            return fail("drop_end must be >= drop_start".into());
        }
        if self.lambda_gen < 0.0 || !self.lambda_gen.is_finite() {
            return fail(format!("lambda_gen must be >= 0, got {}", self.lambda_gen));
        }
        if self.sdf_queries == 0 {
            return fail("sdf_queries must be >= 1".into());
        }
        if self.fragment_budget == 0 {
            return fail("fragment_budget must be >= 1".into());
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return fail("checkpoint_every and log_every must be >= 1".into());
        }
        // The three towers exchange tokens at the autoencoder width.
        let w = self.model.vae.width;
        if self.model.assembly.token_width != w {
            return fail(format!(
                "assembly token_width {} must equal autoencoder width {w}",
                self.model.assembly.token_width
            ));
        }
        if self.model.generation.token_width != w {
            return fail(format!(
                "generation token_width {} must equal autoencoder width {w}",
                self.model.generation.token_width
            ));
        }
        if self.model.generation.image_size != self.data.image_size {
            return fail(format!(
                "condition encoder expects {0}x{0} images but the dataset renders {1}x{1}",
                self.model.generation.image_size, self.data.image_size
            ));
        }
        self.data
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        let back: TrainConfig = toml::from_str(&text).unwrap();
        back.validate().unwrap();
        assert_eq!(back.stage1_steps, cfg.stage1_steps);
        assert_eq!(back.optim.lr, cfg.optim.lr);
        assert_eq!(back.model.vae.width, cfg.model.vae.width);
        assert_eq!(back.precision, cfg.precision);
        assert_eq!(back.data.image_size, cfg.data.image_size);
    }

    #[test]
    fn partial_toml_fills_in_defaults() {
        let cfg: TrainConfig = toml::from_str(
            r#"
            stage1_steps = 10
            [optim]
            lr = 0.001
            "#,
        )
        .unwrap();
        assert_eq!(cfg.stage1_steps, 10);
        assert_eq!(cfg.stage2_steps, 7_500);
        assert_eq!(cfg.optim.lr, 1e-3);
        assert_eq!(cfg.optim.beta1, 0.9);
    }

    #[test]
    fn drop_rate_ramps_linearly() {
        let cfg = TrainConfig::default();
        assert!((cfg.drop_rate_at(0, 1000) - 0.10).abs() < 1e-12);
        assert!((cfg.drop_rate_at(500, 1000) - 0.30).abs() < 1e-12);
        assert!((cfg.drop_rate_at(1000, 1000) - 0.50).abs() < 1e-12);
        // Clamped past the end.
        assert!((cfg.drop_rate_at(2000, 1000) - 0.50).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_hits_peak_and_floor() {
        let optim = OptimConfig::default();
        assert!((optim.lr_at(0, 100) - 1e-4).abs() < 1e-18);
        assert!(optim.lr_at(100, 100).abs() < 1e-18);
        let mid = optim.lr_at(50, 100);
        assert!((mid - 0.5e-4).abs() < 1e-12);
        // Monotone decreasing.
        let mut prev = f64::INFINITY;
        for step in 0..=100 {
            let lr = optim.lr_at(step, 100);
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }

    #[test]
    fn mismatched_widths_are_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.model.assembly.token_width = cfg.model.vae.width + 1;
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));

        let mut cfg = TrainConfig::default();
        cfg.model.generation.image_size = cfg.data.image_size * 2;
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));

        let mut cfg = TrainConfig::default();
        cfg.drop_start = 0.6;
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));
    }
}
