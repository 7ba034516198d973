//! Finite-difference verification of the distillation gradient.

use std::collections::BTreeSet;

use rand::Rng;

use crate::autograd::{Graph, ParamStore, Var};
use crate::corpus_io::{EmbeddingTable, TokenizedDocument, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{masked_softmax, GistDetector};
use crate::nn::Linear;
use crate::rng;
use crate::tensor::Scalar;

/// A model producing one logit per input position.
pub trait KdModel {
    fn params(&self) -> &ParamStore<f32>;

    /// `1 × L` pre-softmax scores built against a store of any precision
    /// sharing this model's layout.
    fn logits<T: Scalar>(&self, g: &mut Graph<T>, ids: &[usize], valid: &[bool]) -> Var;

    /// Parameters indexed by token id; only rows of tokens in the document
    /// are sampled.
    fn embedding_params(&self) -> Vec<usize>;
}

impl KdModel for GistDetector {
    fn params(&self) -> &ParamStore<f32> {
        GistDetector::params(self)
    }

    fn logits<T: Scalar>(&self, g: &mut Graph<T>, ids: &[usize], valid: &[bool]) -> Var {
        GistDetector::logits(self, g, ids, valid).0
    }

    fn embedding_params(&self) -> Vec<usize> {
        self.params().id("word_embedding").into_iter().collect()
    }
}

/// Embedding lookup followed by a linear score per token; no encoder.
#[derive(Clone, Debug)]
pub struct LinearScorer {
    params: ParamStore<f32>,
    embedding: usize,
    head: Linear,
}

impl LinearScorer {
    pub fn new(vocab: &Vocabulary, dim: usize, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let embedding = params.push("embedding", EmbeddingTable::random(vocab, dim, seed).matrix);
        let mut r = rng::stream(seed, "linear-scorer", "");
        let head = Linear::new(&mut params, "head", dim, 1, &mut r);
        // nonzero bias so its gradient is exercised
        params.get_mut(head.b).data[0] = r.gen_range(-0.5..0.5);
        Self { params, embedding, head }
    }
}

impl KdModel for LinearScorer {
    fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    fn logits<T: Scalar>(&self, g: &mut Graph<T>, ids: &[usize], _valid: &[bool]) -> Var {
        let table = g.param(self.embedding);
        let e = g.gather(table, ids);
        let s = self.head.forward(g, e);
        g.transpose(s)
    }

    fn embedding_params(&self) -> Vec<usize> {
        vec![self.embedding]
    }
}

/// Gradient of `-Σ q log softmax(z)` with respect to `z`: `p - q`.
pub fn head_logit_gradient<T: Scalar>(logits: &[T], q: &[T]) -> (Vec<T>, Vec<T>) {
    let store = ParamStore::<T>::new();
    let mut g = Graph::new(&store);
    let z = g.input(crate::tensor::Mat::row_vector(logits.to_vec()));
    let loss = g.soft_target_ce(z, q, None);
    let mut sink = store.zero_grads();
    let grad = g.backward_inputs(loss, &mut sink, &[z]).remove(0).data;
    let p = masked_softmax(logits, &vec![true; logits.len()]).into_iter().map(T::of).collect();
    (grad, p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coords_checked: usize,
}

/// Denominator floor for relative error on near-zero gradients, above the
/// central-difference roundoff at epsilon 1e-5.
const REL_FLOOR: f64 = 1e-6;

fn kd_loss_f64<M: KdModel>(model: &M, store: &ParamStore<f64>, doc: &TokenizedDocument, q: &[f64]) -> f64 {
    let mut g = Graph::new(store);
    let valid = vec![true; doc.n_tokens()];
    let z = model.logits(&mut g, &doc.ids, &valid);
    let loss = g.soft_target_ce(z, q, None);
    g.value(loss).data[0]
}

/// Compares the analytic gradient of the distillation loss with central
/// differences at `coords` sampled coordinates, all in f64 with dropout
/// off. Returns the largest relative error `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check<M: KdModel>(
    model: &M,
    doc: &TokenizedDocument,
    q: &[f64],
    epsilon: f64,
    coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} outside [1e-6, 1e-3]")));
    }
    if q.len() != doc.n_tokens() {
        return Err(Error::LengthMismatch { expected: doc.n_tokens(), found: q.len() });
    }
    let store: ParamStore<f64> = model.params().cast();
    let mut g = Graph::new(&store);
    let valid = vec![true; doc.n_tokens()];
    let z = model.logits(&mut g, &doc.ids, &valid);
    let loss = g.soft_target_ce(z, q, None);
    let mut grads = store.zero_grads();
    g.backward(loss, &mut grads);
    if !grads.all_finite() {
        return Err(Error::NonFinite("analytic gradient".into()));
    }

    let sparse = model.embedding_params();
    let rows: BTreeSet<usize> = doc.ids.iter().copied().collect();
    let candidates: Vec<Vec<usize>> = (0..store.len())
        .map(|id| {
            let t = store.get(id);
            if sparse.contains(&id) {
                rows.iter().flat_map(|&r| (r * t.cols)..((r + 1) * t.cols)).collect()
            } else {
                (0..t.len()).collect()
            }
        })
        .collect();
    let total: usize = candidates.iter().map(Vec::len).sum();
    let mut picks: Vec<(usize, usize)> = Vec::new();
    let mut r = rng::stream(seed, "grad-check", &doc.doc_id);
    // round-robin over tensors so small ones (biases, norms) are covered
    let per = coords.div_ceil(store.len().max(1)).max(1);
    for (id, cand) in candidates.iter().enumerate() {
        for _ in 0..per.min(cand.len()) {
            picks.push((id, cand[r.gen_range(0..cand.len())]));
        }
    }
    while picks.len() < coords.min(total) {
        let id = r.gen_range(0..store.len());
        if !candidates[id].is_empty() {
            picks.push((id, candidates[id][r.gen_range(0..candidates[id].len())]));
        }
    }

    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut work = store.clone();
    for &(id, k) in &picks {
        let orig = work.get(id).data[k];
        work.get_mut(id).data[k] = orig + epsilon;
        let plus = kd_loss_f64(model, &work, doc, q);
        work.get_mut(id).data[k] = orig - epsilon;
        let minus = kd_loss_f64(model, &work, doc, q);
        work.get_mut(id).data[k] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let analytic = grads.tensors[id].data[k];
        if !numeric.is_finite() {
            return Err(Error::NonFinite(format!("finite difference at {}[{k}]", store.name(id))));
        }
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheckReport { max_rel_error: max_rel, max_abs_error: max_abs, coords_checked: picks.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus_io::tokenize;
    use crate::model::DetectorConfig;

    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens((0..10).map(|i| format!("w{i}")))
    }

    #[test]
    fn head_gradient_is_p_minus_q() {
        let z = [0.3f64, -1.2, 2.0, 0.0];
        let q = [0.1f64, 0.2, 0.3, 0.4];
        let (grad, p) = head_logit_gradient(&z, &q);
        for i in 0..4 {
            assert!((grad[i] - (p[i] - q[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_scorer_gradients_are_exact() {
        let v = vocab();
        let m = LinearScorer::new(&v, 6, 1);
        let d = tokenize("g", "w1 w2 w3 w2 w7", &v).unwrap();
        let q = [0.1, 0.4, 0.1, 0.3, 0.1];
        let rep = grad_check(&m, &d, &q, 1e-5, 200, 0).unwrap();
        assert!(rep.coords_checked >= 30);
        assert!(rep.max_rel_error <= 1e-6, "{rep:?}");
    }

    #[test]
    fn small_detector_passes() {
        let v = vocab();
        let cfg = DetectorConfig { word_dim: 6, hidden: 8, heads: 2, ffn_dim: 12, mlp_hidden: 8, max_len: 16, char_cnn: None };
        let m = GistDetector::init(&v, &cfg, 0, None).unwrap();
        let d = tokenize("g", "w1 w2 w3 w4", &v).unwrap();
        let rep = grad_check(&m, &d, &[0.1, 0.6, 0.2, 0.1], 1e-5, 200, 0).unwrap();
        assert!(rep.coords_checked >= 200);
        assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
    }

    #[test]
    fn epsilon_out_of_range() {
        let v = vocab();
        let m = LinearScorer::new(&v, 4, 0);
        let d = tokenize("g", "w1", &v).unwrap();
        assert!(matches!(grad_check(&m, &d, &[1.0], 1e-2, 10, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(grad_check(&m, &d, &[1.0], 1e-8, 10, 0), Err(Error::InvalidArgument(_))));
    }
}
