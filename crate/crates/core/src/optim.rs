//! Adam with global-norm gradient clipping, plus the batch-gradient helper
//! shared by every training loop.

use serde::{Deserialize, Serialize};

use crate::autograd::{ParamGrads, ParamStore};
use crate::exec::Execution;
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm threshold; `None` disables clipping.
    pub grad_clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 4e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, grad_clip_norm: Some(2.0) }
    }
}

/// Instrumentation for one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clipped_norm: f64,
    pub update_norm: f64,
    pub max_update: f64,
}

pub struct Adam {
    config: AdamConfig,
    m: Vec<Mat<f32>>,
    v: Vec<Mat<f32>>,
    t: u32,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore<f32>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Mat::zeros(t.rows, t.cols)).collect();
        Self { config, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &mut ParamGrads<f32>) -> StepStats {
        let grad_norm = grads.global_norm();
        let mut clipped_norm = grad_norm;
        if let Some(max) = self.config.grad_clip_norm {
            if grad_norm > max {
                grads.scale((max / grad_norm) as f32);
                clipped_norm = grads.global_norm();
            }
        }
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let step = (c.lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = c.eps as f32;
        let mut update_sq = 0.0f64;
        let mut max_update = 0.0f64;
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(&grads.tensors).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                let delta = step * m.data[i] / (v.data[i].sqrt() / bc2_sqrt + eps);
                p.data[i] -= delta;
                update_sq += (delta as f64) * (delta as f64);
                max_update = max_update.max((delta as f64).abs());
            }
        }
        StepStats { grad_norm, clipped_norm, update_norm: update_sq.sqrt(), max_update }
    }
}

/// Mean loss and mean gradient over `items`. Per-item gradients are
/// computed through `exec` and reduced in input order, so the result does
/// not depend on the thread count.
pub fn batch_gradient<I, F>(params: &ParamStore<f32>, items: &[I], exec: Execution, f: F) -> (f64, ParamGrads<f32>)
where
    I: Sync,
    F: Fn(&I) -> (f64, ParamGrads<f32>) + Sync + Send,
{
    let per_item = exec.map(items, f);
    let mut total = params.zero_grads();
    let mut loss = 0.0;
    for (l, g) in &per_item {
        loss += l;
        total.add_assign(g);
    }
    let n = items.len().max(1);
    total.scale(1.0 / n as f32);
    (loss / n as f64, total)
}
