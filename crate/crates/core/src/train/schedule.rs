use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Decoupled-weight-decay Adam settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self, what: &str) -> Result<()> {
        for (field, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{what}.optim.{field} must be in [0, 1), got {v}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("{what}.optim.eps must be positive, got {}", self.eps)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "{what}.optim.weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// One training stage. `batch_size` counts examples (image–caption pairs
/// in Stage 1) per micro-batch; Stage 2 accumulates `text_micro_batches`
/// text-only and `mm_micro_batches` multimodal micro-batches per update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub batch_size: usize,
    pub text_micro_batches: usize,
    pub mm_micro_batches: usize,
    pub max_len: usize,
    pub seed: u64,
    pub optim: AdamWConfig,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig::stage1_desk()
    }
}

impl StageConfig {
    /// Multimodal pretraining hyperparameters at full scale.
    pub fn stage1_nominal() -> Self {
        StageConfig {
            total_steps: 50_000,
            warmup_steps: 375,
            peak_lr: 2e-4,
            min_lr: 0.0,
            batch_size: 4096,
            text_micro_batches: 0,
            mm_micro_batches: 1,
            max_len: 512,
            seed: 0,
            optim: AdamWConfig {
                beta1: 0.9,
                beta2: 0.98,
                eps: 1e-6,
                weight_decay: 0.01,
            },
        }
    }

    /// Joint instruction tuning hyperparameters at full scale.
    pub fn stage2_nominal() -> Self {
        StageConfig {
            total_steps: 2000,
            warmup_steps: 50,
            peak_lr: 2e-5,
            min_lr: 0.0,
            batch_size: 128,
            text_micro_batches: 1,
            mm_micro_batches: 1,
            max_len: 1024,
            seed: 0,
            optim: AdamWConfig {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-6,
                weight_decay: 1e-4,
            },
        }
    }

    pub fn stage1_desk() -> Self {
        StageConfig {
            total_steps: 500,
            warmup_steps: 25,
            peak_lr: 4e-3,
            batch_size: 8,
            max_len: 64,
            ..StageConfig::stage1_nominal()
        }
    }

    pub fn stage2_desk() -> Self {
        StageConfig {
            total_steps: 300,
            warmup_steps: 15,
            peak_lr: 2e-3,
            batch_size: 4,
            text_micro_batches: 1,
            mm_micro_batches: 2,
            max_len: 64,
            ..StageConfig::stage2_nominal()
        }
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config(format!("{what}.total_steps must be positive")));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "{what}.warmup_steps {} must be below {what}.total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.peak_lr > 0.0) || !(self.min_lr >= 0.0) || self.min_lr > self.peak_lr {
            return Err(Error::Config(format!(
                "{what}.peak_lr/min_lr must satisfy 0 ≤ min_lr ≤ peak_lr, 0 < peak_lr (got {} / {})",
                self.peak_lr, self.min_lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{what}.batch_size must be at least 1")));
        }
        if self.text_micro_batches + self.mm_micro_batches == 0 {
            return Err(Error::Config(format!(
                "{what}.text_micro_batches + {what}.mm_micro_batches must be at least 1"
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config(format!("{what}.max_len must be at least 2")));
        }
        self.optim.validate(what)
    }
}

/// Linear warmup from 0 to the peak, then cosine decay to `min_lr` at
/// `total_steps`.
pub fn lr_at(step: usize, cfg: &StageConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::Contract(format!(
            "step {step} outside the schedule [0, {}]",
            cfg.total_steps
        )));
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.peak_lr * step as f64 / cfg.warmup_steps as f64);
    }
    if step == cfg.total_steps {
        return Ok(cfg.min_lr);
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    Ok(cfg.min_lr + (cfg.peak_lr - cfg.min_lr) * 0.5 * (1.0 + (PI * progress).cos()))
}
