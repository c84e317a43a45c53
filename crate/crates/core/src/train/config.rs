use serde::{Deserialize, Serialize};

use crate::diffusion::ModelConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: u64,
    /// Peak learning rate; cosine-decays to `final_lr_fraction · learning_rate`.
    pub learning_rate: f64,
    pub final_lr_fraction: f64,
    pub warmup_steps: u64,
    pub lambda: f64,
    pub dropout_p: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub grad_clip: f64,
    pub ema_decay: f64,
    pub use_ema: bool,
    pub clamp_x0: bool,
    pub adam: AdamConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            total_steps: 20_000,
            learning_rate: 1e-4,
            final_lr_fraction: 0.0,
            warmup_steps: 0,
            lambda: 2.0,
            dropout_p: 0.05,
            seed: 0,
            checkpoint_every: 1000,
            log_every: 50,
            grad_clip: 1.0,
            ema_decay: 0.999,
            use_ema: true,
            clamp_x0: true,
            adam: AdamConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail("dropout_p must lie in [0, 1)");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail("lambda must be finite and ≥ 0");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be finite and ≥ 0");
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return fail("final_lr_fraction must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return fail("ema_decay must lie in [0, 1)");
        }
        if self.log_every == 0 || self.checkpoint_every == 0 {
            return fail("log_every and checkpoint_every must be positive");
        }
        if self.grad_clip <= 0.0 {
            return fail("grad_clip must be positive");
        }
        self.model.validate()
    }

    /// Learning rate for the update that produces step `step + 1`: linear
    /// warm-up, then half-cosine decay over the remaining steps.
    pub fn lr_at(&self, step: u64) -> f64 {
        let peak = self.learning_rate;
        if step < self.warmup_steps {
            return peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let floor = peak * self.final_lr_fraction;
        floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
