//! Transformer building blocks over the tape. Layers hold parameter indices
//! only, so one layout serves both the f32 store used for training and an
//! f64 copy used for gradient checks.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttnMask, Graph, ParamStore, Var};
use crate::tensor::{Mat, Scalar};

pub(crate) fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat<f32> {
    let bound = (6.0 / (rows + cols) as f64).sqrt() as f32;
    Mat::from_fn(rows, cols, |_, _| rng.gen_range(-bound..=bound))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore<f32>, name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = store.push(format!("{name}.weight"), xavier(rng, input, output));
        let b = store.push(format!("{name}.bias"), Mat::zeros(1, output));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_bias(y, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore<f32>, name: &str, dim: usize) -> Self {
        let gamma = store.push(format!("{name}.gamma"), Mat::from_vec(1, dim, vec![1.0; dim]));
        let beta = store.push(format!("{name}.beta"), Mat::zeros(1, dim));
        Self { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore<f32>, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(heads > 0 && dim % heads == 0, "hidden size {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        }
    }

    /// Returns the attended output and each head's probability matrix
    /// (`queries × keys`).
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, query: Var, memory: Var, mask: Option<&AttnMask>) -> (Var, Vec<Var>) {
        let q = self.q.forward(g, query);
        let k = self.k.forward(g, memory);
        let v = self.v.forward(g, memory);
        let dh = self.dim / self.heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let p = g.softmax(scores, mask.cloned());
            probs.push(p);
            outs.push(g.matmul(p, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        (self.o.forward(g, cat), probs)
    }
}

/// Post-norm encoder layer: self-attention then a GELU feed-forward block.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore<f32>, name: &str, dim: usize, heads: usize, ffn: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            ff1: Linear::new(store, &format!("{name}.ff1"), dim, ffn, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), ffn, dim, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, mask: Option<&AttnMask>) -> Var {
        let (a, _) = self.attn.forward(g, x, x, mask);
        let a = g.dropout(a);
        let x = g.add(x, a);
        let x = self.norm1.forward(g, x);
        let f = feed_forward(g, &self.ff1, &self.ff2, x);
        let x2 = g.add(x, f);
        self.norm2.forward(g, x2)
    }
}

/// Post-norm decoder layer with causal self-attention and cross-attention.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore<f32>, name: &str, dim: usize, heads: usize, ffn: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), dim, heads, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), dim, heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            ff1: Linear::new(store, &format!("{name}.ff1"), dim, ffn, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), ffn, dim, rng),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), dim),
        }
    }

    /// Returns the layer output and the per-head cross-attention matrices.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        y: Var,
        memory: Var,
        causal: &AttnMask,
        memory_mask: Option<&AttnMask>,
    ) -> (Var, Vec<Var>) {
        let (a, _) = self.self_attn.forward(g, y, y, Some(causal));
        let a = g.dropout(a);
        let y = g.add(y, a);
        let y = self.norm1.forward(g, y);
        let (c, cross) = self.cross_attn.forward(g, y, memory, memory_mask);
        let c = g.dropout(c);
        let y = g.add(y, c);
        let y = self.norm2.forward(g, y);
        let f = feed_forward(g, &self.ff1, &self.ff2, y);
        let y2 = g.add(y, f);
        (self.norm3.forward(g, y2), cross)
    }
}

fn feed_forward<T: Scalar>(g: &mut Graph<T>, ff1: &Linear, ff2: &Linear, x: Var) -> Var {
    let h = ff1.forward(g, x);
    let h = g.gelu(h);
    let f = ff2.forward(g, h);
    g.dropout(f)
}

/// Key-padding mask shared by every query row.
pub fn key_mask(valid: &[bool]) -> Option<AttnMask> {
    if valid.iter().all(|&v| v) {
        None
    } else {
        Some(Arc::new(valid.to_vec()))
    }
}

/// Lower-triangular mask for `n` decoder positions.
pub fn causal_mask(n: usize) -> AttnMask {
    Arc::new((0..n * n).map(|i| i % n <= i / n).collect())
}
