//! Training the gist detector against teacher soft targets.

mod gradcheck;
mod loss;
mod train;

use serde::{Deserialize, Serialize};

pub use gradcheck::{grad_check, head_logit_gradient, GradCheckReport, KdModel, LinearScorer};
pub use loss::{entropy, kd_loss, kl_divergence, total_variation};
pub use train::{example_gradient, held_out, train, DistillExample, EpochReport, TrainReport, TrainedStudent};

use crate::error::{Error, Result};
use crate::optim::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub grad_clip_norm: f64,
    pub epochs: usize,
    pub seed: u64,
    pub eval_fraction: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            dropout: 0.35,
            batch_size: 16,
            grad_clip_norm: 2.0,
            epochs: 20,
            seed: 0,
            eval_fraction: 0.1,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::OutOfRange("lr".into()));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::OutOfRange(name.into()));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::OutOfRange("dropout".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::OutOfRange("batch_size".into()));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::OutOfRange("grad_clip_norm".into()));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::OutOfRange("eval_fraction".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            grad_clip_norm: Some(self.grad_clip_norm),
            ..AdamConfig::default()
        }
    }
}
