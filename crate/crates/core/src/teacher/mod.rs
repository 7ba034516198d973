//! Teachers that emit decoder cross-attention traces, and the reduction of
//! those traces to per-token soft targets.

mod oracle;
mod soft_target;
mod toy;

use serde::{Deserialize, Serialize};

pub use oracle::{oracle_teacher_trace, salient_positions};
pub use soft_target::{combine_ensemble, soft_target_from_trace, soft_target_masked, soft_target_with, Reduction, SoftTarget};
pub use toy::{train_toy_teacher, ToyTeacher, TrainedTeacher, TEACHER_CHECKPOINT_KIND};

use crate::error::{Error, Result};

/// Which cross-attention the teacher exposes per decoding step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AttentionSource {
    /// Mean over heads of the last decoder layer.
    #[default]
    FinalLayerMeanHeads,
    /// Mean over every decoder layer and head.
    PerLayerMean,
    /// Mean over heads of one decoder layer.
    LayerMeanHeads { layer: usize },
    LayerHead { layer: usize, head: usize },
}

/// Whether traces come from the gold summary or from greedy decoding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceMode {
    #[default]
    TeacherForced,
    Greedy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub hidden_size: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub max_len: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub grad_clip_norm: f64,
    pub epochs: usize,
    pub ensemble_size: usize,
    pub seed: u64,
    pub attention_source: AttentionSource,
    pub trace_mode: TraceMode,
    pub reduction: Reduction,
    /// Decoding cap for greedy traces.
    pub max_summary_len: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            hidden_size: 512,
            heads: 8,
            ffn_dim: 2048,
            encoder_layers: 2,
            decoder_layers: 2,
            max_len: 512,
            lr: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            dropout: 0.35,
            batch_size: 16,
            grad_clip_norm: 2.0,
            epochs: 10,
            ensemble_size: 1,
            seed: 0,
            attention_source: AttentionSource::default(),
            trace_mode: TraceMode::default(),
            reduction: Reduction::default(),
            max_summary_len: 64,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_size", self.hidden_size),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("max_len", self.max_len),
            ("batch_size", self.batch_size),
            ("ensemble_size", self.ensemble_size),
            ("max_summary_len", self.max_summary_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::OutOfRange(name.into()));
            }
        }
        if self.hidden_size % self.heads != 0 {
            return Err(Error::OutOfRange("heads".into()));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::OutOfRange(name.into()));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::OutOfRange("dropout".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::OutOfRange("lr".into()));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::OutOfRange("grad_clip_norm".into()));
        }
        if let AttentionSource::LayerMeanHeads { layer } = self.attention_source {
            if layer >= self.decoder_layers {
                return Err(Error::OutOfRange("attention_source.layer".into()));
            }
        }
        if let AttentionSource::LayerHead { layer, head } = self.attention_source {
            if layer >= self.decoder_layers {
                return Err(Error::OutOfRange("attention_source.layer".into()));
            }
            if head >= self.heads {
                return Err(Error::OutOfRange("attention_source.head".into()));
            }
        }
        Ok(())
    }
}
