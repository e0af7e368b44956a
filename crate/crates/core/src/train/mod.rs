//! Pretraining: learning-rate schedule, optimization step, checkpoints and
//! the training loop.

mod checkpoint;
mod run;
mod step;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, SamplerConfig};
use crate::model::{ModelConfig, ModelError};
use crate::tensor::{OptimError, TensorError};

pub use checkpoint::TrainCheckpoint;
pub use run::{read_metrics, run, RunOptions, RunSummary, METRICS_FILE};
pub use step::{batch_losses, train_step, BatchLosses, StepMetrics, TrainState};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}; step skipped")]
    NonFiniteLoss { step: u64 },
    #[error("aborting after {0} faulted steps")]
    TooManyFaults(u64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// Optimization, schedule and sampling settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: u64,
    pub batch_size: usize,
    /// Weight of the contrastive term in the total loss.
    pub lambda: f64,
    pub seed: u64,
    pub resample_period: u64,
    pub active_subset_size: Option<usize>,
    pub descriptions_per_speaker: usize,
    pub grad_clip: f64,
    /// Steps between periodic checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub max_faults: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 3000,
            warmup_steps: 150,
            base_lr: 1e-4,
            decay_factor: 0.99,
            decay_every: 200,
            batch_size: 8,
            lambda: 1.0,
            seed: 0,
            resample_period: 2000,
            active_subset_size: None,
            descriptions_per_speaker: crate::prompts::DESCRIPTIONS_PER_SPEAKER,
            grad_clip: 1.0,
            checkpoint_every: 1000,
            max_faults: 10,
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule: 50k steps, 2500 warmup, decay every 2000.
    pub fn full_scale() -> Self {
        Self {
            total_steps: 50_000,
            warmup_steps: 2500,
            decay_every: 2000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return bad(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return bad(format!("base_lr {} must be positive", self.base_lr));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay_factor {} outside (0, 1]", self.decay_factor));
        }
        if self.decay_every == 0 || self.resample_period == 0 {
            return bad("decay_every and resample_period must be positive".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size {} must be at least 2", self.batch_size));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda {} must be finite and >= 0", self.lambda));
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive".into());
        }
        Ok(())
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            batch_size: self.batch_size,
            resample_period: self.resample_period,
            active_subset_size: self.active_subset_size,
            descriptions_per_speaker: self.descriptions_per_speaker,
            seed: self.seed,
        }
    }
}

/// Everything a pretraining run is configured by.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Linear warmup to `base_lr`, then a step decay by `decay_factor` every
/// `decay_every` steps.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        cfg.base_lr * step as f64 / cfg.warmup_steps as f64
    } else {
        let k = (step - cfg.warmup_steps) / cfg.decay_every;
        cfg.base_lr * cfg.decay_factor.powi(k.min(i32::MAX as u64) as i32)
    }
}
