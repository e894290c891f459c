//! Optimizer, learning-rate schedule, training loop and evaluation.

mod engine;
mod image;
mod optim;
mod pipeline;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use engine::{
    evaluate, evaluate_classifier, near_peak_epoch, near_peak_index, run_stage, top_k_hit,
    train_classifier, Classifier, EvalRecord, RunMetrics, StepRecord,
};
pub use image::{pretrain_image, ImagePretrainConfig, ImagePretrainResult};
pub use optim::Sgd;
pub use pipeline::{initialize_run, run_pipeline, InitSource, PipelineResult, PipelineStep, RunSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    WarmupCosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub local_batch: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub warmup_epochs: f64,
    pub schedule: Schedule,
    pub seed: u64,
    /// Steps between evaluations; 0 evaluates at the end of every epoch.
    pub eval_every: usize,
    pub label_smoothing: f64,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            local_batch: 16,
            base_lr: 0.05,
            momentum: 0.9,
            warmup_epochs: 2.5,
            schedule: Schedule::WarmupCosine,
            seed: 0,
            eval_every: 0,
            label_smoothing: 0.0,
            eval_batch: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        // An empty run has no schedule to constrain.
        if self.epochs > 0 && !(self.warmup_epochs >= 0.0 && self.warmup_epochs < self.epochs as f64) {
            return Err(Error::Config(format!(
                "warmup_epochs must be in [0, {}), got {}",
                self.epochs, self.warmup_epochs
            )));
        }
        if self.local_batch == 0 || self.eval_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Number of warmup steps for a run of `total_steps`.
    pub fn warmup_steps(&self, total_steps: usize) -> f64 {
        if self.epochs == 0 {
            return 0.0;
        }
        total_steps as f64 * self.warmup_epochs / self.epochs as f64
    }
}

/// Learning rate for `step` of `total_steps`: a linear ramp from zero over
/// the warmup, then a half-cosine down to zero.
pub fn lr_at(step: usize, total_steps: usize, config: &TrainConfig) -> f64 {
    let base = config.base_lr;
    let warmup = config.warmup_steps(total_steps);
    let step = step as f64;
    if step < warmup {
        return base * step / warmup;
    }
    let span = total_steps as f64 - warmup;
    if span <= 0.0 {
        return 0.0;
    }
    let progress = ((step - warmup) / span).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
