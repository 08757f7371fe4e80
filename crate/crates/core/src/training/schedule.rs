//! Step configurations and the warm-up plus half-cosine learning rate.

use crate::blocks::WeightMode;
use crate::error::{Error, Result};

use super::adam::AdamParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    /// Real shadow weights on binary activations.
    One,
    /// Binary weights and activations.
    Two,
}

impl Step {
    pub fn weight_mode(self) -> WeightMode {
        match self {
            Self::One => WeightMode::Real,
            Self::Two => WeightMode::Binary,
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Self::One => 1,
            Self::Two => 2,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Self::One),
            2 => Ok(Self::Two),
            _ => Err(Error::InvalidArgument(format!("training step must be 1 or 2, got {n}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    /// Cross-entropy against teacher probability mass functions.
    Distributional,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub step: Step,
    pub batch_size: usize,
    pub max_lr: f32,
    pub warmup_epochs: usize,
    pub decay_epochs: usize,
    pub initial_lr_scale: f32,
    pub final_lr_scale: f32,
    /// L2 coefficient on convolution weights only.
    pub weight_decay: f32,
    pub loss: LossKind,
    pub bn_momentum: f32,
    pub adam: AdamParams,
}

impl TrainConfig {
    pub fn step1() -> Self {
        Self {
            step: Step::One,
            batch_size: 64,
            max_lr: 5e-4,
            warmup_epochs: 5,
            decay_epochs: 20,
            initial_lr_scale: 0.01,
            final_lr_scale: 0.001,
            weight_decay: 1e-5,
            loss: LossKind::CrossEntropy,
            bn_momentum: 0.1,
            adam: AdamParams::default(),
        }
    }

    pub fn step2() -> Self {
        Self {
            step: Step::Two,
            decay_epochs: 100,
            weight_decay: 0.0,
            ..Self::step1()
        }
    }

    pub fn for_step(step: Step) -> Self {
        match step {
            Step::One => Self::step1(),
            Step::Two => Self::step2(),
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.warmup_epochs + self.decay_epochs
    }

    pub fn with_epochs(mut self, warmup: usize, decay: usize) -> Self {
        self.warmup_epochs = warmup;
        self.decay_epochs = decay;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.max_lr.is_finite() && self.max_lr > 0.0) {
            return bad("max learning rate must be positive");
        }
        if self.total_epochs() == 0 {
            return bad("at least one epoch is required");
        }
        if !(self.initial_lr_scale > 0.0 && self.final_lr_scale > 0.0) {
            return bad("learning rate scales must be positive");
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.weight_decay < 0.0 {
            return bad("batch norm momentum must lie in [0, 1] and weight decay be nonnegative");
        }
        Ok(())
    }
}

/// Learning rate after `epoch_fraction` epochs: linear from
/// `initial_lr_scale * max_lr` to `max_lr` over the warm-up, then a half
/// cosine from `max_lr` down to `final_lr_scale * max_lr`.
pub fn lr_schedule(epoch_fraction: f64, cfg: &TrainConfig) -> f32 {
    let max = cfg.max_lr as f64;
    let warm = cfg.warmup_epochs as f64;
    let init = cfg.initial_lr_scale as f64;
    let fin = cfg.final_lr_scale as f64;
    let e = epoch_fraction.max(0.0);
    let lr = if e < warm {
        max * (init + (1.0 - init) * e / warm)
    } else if cfg.decay_epochs == 0 {
        max
    } else {
        let t = ((e - warm) / cfg.decay_epochs as f64).min(1.0);
        max * (fin + (1.0 - fin) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
    };
    lr as f32
}
