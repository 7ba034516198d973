use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::loss::{kd_loss, total_variation};
use super::DistillConfig;
use crate::autograd::{Graph, ParamGrads};
use crate::corpus_io::TokenizedDocument;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{pad, GistDetector};
use crate::optim::{batch_gradient, Adam};
use crate::rng;
use crate::teacher::SoftTarget;

#[derive(Clone, Debug)]
pub struct DistillExample {
    pub doc: TokenizedDocument,
    pub target: SoftTarget,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub held_out_loss: f64,
    pub held_out_tv: f64,
    /// Largest gradient norm handed to the optimizer after clipping.
    pub max_clipped_grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
    pub best_epoch: Option<usize>,
    pub train_docs: usize,
    pub held_out_docs: usize,
    pub steps: usize,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn final_held_out_tv(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.held_out_tv)
    }
}

pub struct TrainedStudent {
    /// Parameters from the epoch with the lowest held-out loss.
    pub best: GistDetector,
    /// Parameters after the last epoch.
    pub last: GistDetector,
    pub report: TrainReport,
}

/// Whether a document belongs to the held-out split, by hash of its id.
pub fn held_out(doc_id: &str, fraction: f64) -> bool {
    let h = Sha256::digest(doc_id.as_bytes());
    let bucket = u64::from_le_bytes(h[..8].try_into().unwrap()) % 10_000;
    (bucket as f64) < fraction * 10_000.0
}

fn example_grad(model: &GistDetector, ex: &DistillExample, width: usize, dropout: Option<(f64, String, u64)>) -> (f64, ParamGrads<f32>) {
    let (ids, valid) = pad(&ex.doc.ids, width);
    let mut q: Vec<f32> = ex.target.q.iter().map(|&v| v as f32).collect();
    q.resize(width, 0.0);
    let mut g = Graph::new(model.params());
    if let Some((rate, key, seed)) = dropout {
        g = g.with_dropout(rate, rng::stream(seed, "distill-dropout", &key));
    }
    let (logits, _) = model.logits(&mut g, &ids, &valid);
    let loss = g.soft_target_ce(logits, &q, Some(&valid));
    let mut grads = model.params().zero_grads();
    g.backward(loss, &mut grads);
    (g.value(loss).data[0] as f64, grads)
}

/// Loss and parameter gradient of one example, without dropout.
pub fn example_gradient(model: &GistDetector, ex: &DistillExample) -> (f64, ParamGrads<f32>) {
    example_grad(model, ex, ex.doc.n_tokens(), None)
}

/// Groups a shuffled order into length-homogeneous batches: windows of
/// `8 × batch` are sorted by length, cut into batches, and the batches are
/// shuffled again.
fn bucketed_batches(order: &[usize], lens: &[usize], batch: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    for window in order.chunks(batch * 8) {
        let mut w = window.to_vec();
        w.sort_by_key(|&i| lens[i]);
        batches.extend(w.chunks(batch).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

fn evaluate(model: &GistDetector, set: &[&DistillExample], exec: Execution) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let scores: Vec<Result<(f64, f64)>> = exec.map(set, |ex| {
        let p = model.forward(&ex.doc)?.p;
        Ok((kd_loss(&p, &ex.target.q)?, total_variation(&p, &ex.target.q)?))
    });
    let mut loss = 0.0;
    let mut tv = 0.0;
    for s in scores {
        let (l, t) = s?;
        loss += l;
        tv += t;
    }
    Ok((loss / set.len() as f64, tv / set.len() as f64))
}

/// Minimizes the mean per-document distillation loss with Adam and global
/// norm clipping. Shuffling and dropout streams derive from `config.seed`.
pub fn train(student: GistDetector, data: &[DistillExample], config: &DistillConfig, exec: Execution) -> Result<TrainedStudent> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("distillation needs at least one example".into()));
    }
    for ex in data {
        if ex.target.q.len() != ex.doc.n_tokens() {
            return Err(Error::LengthMismatch { expected: ex.doc.n_tokens(), found: ex.target.q.len() });
        }
        if ex.target.doc_id != ex.doc.doc_id {
            return Err(Error::InvalidArgument(format!("target {:?} paired with document {:?}", ex.target.doc_id, ex.doc.doc_id)));
        }
        student.check_length(ex.doc.n_tokens())?;
    }
    let started = Instant::now();
    let (mut eval, mut fit): (Vec<&DistillExample>, Vec<&DistillExample>) =
        data.iter().partition(|ex| held_out(&ex.doc.doc_id, config.eval_fraction));
    if fit.is_empty() {
        fit = eval.clone();
    }
    if eval.is_empty() && config.eval_fraction > 0.0 {
        eval = fit.clone();
    }
    let lens: Vec<usize> = fit.iter().map(|ex| ex.doc.n_tokens()).collect();

    let mut model = student;
    let mut opt = Adam::new(config.adam(), model.params());
    let mut best: Option<(f64, usize, GistDetector)> = None;
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..fit.len()).collect();
    for epoch in 0..config.epochs {
        let mut shuffle = rng::stream(config.seed, "distill-shuffle", &epoch.to_string());
        order.shuffle(&mut shuffle);
        let batches = bucketed_batches(&order, &lens, config.batch_size, &mut shuffle);
        let mut epoch_loss = 0.0;
        let mut max_clipped = 0.0f64;
        for batch in &batches {
            let width = batch.iter().map(|&i| lens[i]).max().unwrap();
            let items: Vec<&DistillExample> = batch.iter().map(|&i| fit[i]).collect();
            let (loss, mut grads) = batch_gradient(model.params(), &items, exec, |ex| {
                let key = format!("{epoch}:{step}:{}", ex.doc.doc_id);
                example_grad(&model, ex, width, Some((config.dropout, key, config.seed)))
            });
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            let stats = opt.step(model.params_mut(), &mut grads);
            max_clipped = max_clipped.max(stats.clipped_norm);
            epoch_loss += loss * items.len() as f64;
            step += 1;
        }
        let train_loss = epoch_loss / fit.len() as f64;
        let (held_out_loss, held_out_tv) = evaluate(&model, &eval, exec)?;
        tracing::info!(epoch, train_loss, held_out_loss, held_out_tv, "distill epoch");
        epochs.push(EpochReport { epoch, train_loss, held_out_loss, held_out_tv, max_clipped_grad_norm: max_clipped });
        let score = if held_out_loss.is_nan() { train_loss } else { held_out_loss };
        if best.as_ref().map_or(true, |(b, _, _)| score < *b) {
            best = Some((score, epoch, model.clone()));
        }
    }
    let (best_epoch, best_model) = match best {
        Some((_, e, m)) => (Some(e), m),
        None => (None, model.clone()),
    };
    let report = TrainReport {
        epochs,
        best_epoch,
        train_docs: fit.len(),
        held_out_docs: eval.len(),
        steps: step,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainedStudent { best: best_model, last: model, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus_io::{tokenize, Vocabulary};
    use crate::model::DetectorConfig;

    fn setup(n: usize) -> (GistDetector, Vec<DistillExample>) {
        let v = Vocabulary::from_tokens((0..8).map(|i| format!("w{i}")));
        let cfg = DetectorConfig { word_dim: 6, hidden: 8, heads: 2, ffn_dim: 12, mlp_hidden: 8, max_len: 16, char_cnn: None };
        let m = GistDetector::init(&v, &cfg, 0, None).unwrap();
        let data = (0..n)
            .map(|i| {
                let text: Vec<String> = (0..3 + i % 4).map(|k| format!("w{}", (i + k) % 8)).collect();
                let doc = tokenize(format!("d{i}"), &text.join(" "), &v).unwrap();
                let mut q = vec![0.0; doc.n_tokens()];
                q[0] = 1.0;
                DistillExample { target: SoftTarget { doc_id: doc.doc_id.clone(), q }, doc }
            })
            .collect();
        (m, data)
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (m, data) = setup(10);
        let before = m.params().clone();
        let cfg = DistillConfig { lr: 0.0, epochs: 1, batch_size: 4, ..Default::default() };
        let out = train(m, &data, &cfg, Execution::Sequential).unwrap();
        assert_eq!(out.last.params(), &before);
    }

    #[test]
    fn batch_size_changes_first_step_loss() {
        let (m, data) = setup(16);
        let first = |batch: usize| {
            let items: Vec<&DistillExample> = data.iter().take(batch).collect();
            let width = items.iter().map(|e| e.doc.n_tokens()).max().unwrap();
            batch_gradient(m.params(), &items, Execution::Sequential, |ex| example_grad(&m, ex, width, None)).0
        };
        assert_ne!(first(1), first(16));
    }

    #[test]
    fn training_is_deterministic_across_execution_modes() {
        let (m, data) = setup(12);
        let cfg = DistillConfig { epochs: 2, batch_size: 4, lr: 1e-2, ..Default::default() };
        let a = train(m.clone(), &data, &cfg, Execution::Sequential).unwrap();
        let b = train(m, &data, &cfg, Execution::Parallel).unwrap();
        assert_eq!(a.last.params(), b.last.params());
        assert_eq!(a.report.epochs, b.report.epochs);
    }

    #[test]
    fn padding_receives_no_gradient_signal() {
        let (m, data) = setup(1);
        let ex = &data[0];
        let (l1, g1) = example_grad(&m, ex, ex.doc.n_tokens(), None);
        let (l2, g2) = example_grad(&m, ex, ex.doc.n_tokens() + 3, None);
        assert!((l1 - l2).abs() < 1e-5);
        for (a, b) in g1.tensors.iter().zip(&g2.tensors) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1e-4, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn held_out_split_is_stable() {
        let picked: Vec<bool> = (0..1000).map(|i| held_out(&format!("doc-{i}"), 0.1)).collect();
        let frac = picked.iter().filter(|&&b| b).count() as f64 / 1000.0;
        assert!((0.05..0.15).contains(&frac), "{frac}");
        assert_eq!(picked, (0..1000).map(|i| held_out(&format!("doc-{i}"), 0.1)).collect::<Vec<_>>());
    }

    #[test]
    fn mismatched_target_is_rejected() {
        let (m, mut data) = setup(2);
        data[0].target.q.push(0.0);
        assert!(matches!(train(m, &data, &DistillConfig::default(), Execution::Sequential), Err(Error::LengthMismatch { .. })));
    }
}
