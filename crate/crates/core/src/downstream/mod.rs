//! Small synthetic downstream tasks that consume importance distributions
//! through the fusion operators, with paired fused/unfused runs.

mod highlight;
mod needle;
mod passage;

pub use highlight::{render_highlight, HighlightFormat};
pub use needle::{run_classification, NeedleData, NeedleExample, NeedleTask};
pub use passage::{run_passage_selection, run_span_scoring, PassageData, PassageTask, Question};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamGrads, ParamStore};
use crate::corpus_io::TokenizedDocument;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::GistDetector;
use crate::optim::{batch_gradient, Adam, AdamConfig};
use crate::rng;

/// Where the importance distribution for each document comes from.
#[derive(Clone, Copy, Debug)]
pub enum ImportanceSource<'a> {
    /// Mass spread evenly over the task's gold region (needle span or
    /// answer span); uniform when a document has none.
    Oracle,
    Uniform,
    Detector(&'a GistDetector),
}

impl ImportanceSource<'_> {
    pub fn label(&self) -> &'static str {
        match self {
            ImportanceSource::Oracle => "oracle",
            ImportanceSource::Uniform => "uniform",
            ImportanceSource::Detector(_) => "detector",
        }
    }

    /// Importance over `doc`; `gold` lists inclusive spans used by the oracle.
    pub(crate) fn weights(&self, doc: &TokenizedDocument, gold: &[[usize; 2]]) -> Result<Vec<f64>> {
        let n = doc.n_tokens();
        match self {
            ImportanceSource::Uniform => Ok(vec![1.0 / n as f64; n]),
            ImportanceSource::Oracle => {
                let mut p = vec![0.0; n];
                for &[a, b] in gold {
                    if b >= n || a > b {
                        return Err(Error::IndexOutOfRange { index: b, len: n });
                    }
                    p[a..=b].iter_mut().for_each(|v| *v = 1.0);
                }
                let s: f64 = p.iter().sum();
                if s == 0.0 {
                    return ImportanceSource::Uniform.weights(doc, gold);
                }
                Ok(p.into_iter().map(|v| v / s).collect())
            }
            ImportanceSource::Detector(m) => {
                let vocab = m.vocab();
                let ids = doc.tokens.iter().map(|t| vocab.id(t)).collect();
                let retok = TokenizedDocument { doc_id: doc.doc_id.clone(), tokens: doc.tokens.clone(), ids };
                Ok(m.forward(&retok)?.p)
            }
        }
    }
}

/// Optimization settings shared by the downstream baselines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self { embed_dim: 16, hidden: 16, epochs: 8, batch_size: 16, lr: 3e-3 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hit_at_1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hit_at_3: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hit_at_5: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_match: Option<f64>,
}

/// Paired result of one seeded run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub seed: u64,
    pub importance: String,
    pub lambda_repr: f64,
    pub lambda_score: f64,
    pub baseline: Metrics,
    pub fused: Metrics,
}

impl MetricsReport {
    pub fn all_in_unit_range(&self) -> bool {
        [&self.baseline, &self.fused].iter().all(|m| {
            [m.accuracy, m.hit_at_1, m.hit_at_3, m.hit_at_5, m.exact_match]
                .iter()
                .flatten()
                .all(|v| (0.0..=1.0).contains(v))
        })
    }
}

/// Rank of `target` when `scores` are sorted descending, ties broken by
/// index. Zero-based.
pub(crate) fn rank_of(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    scores.iter().enumerate().filter(|&(i, &s)| s > t || (s == t && i < target)).count()
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Minibatch Adam over `items` for `cfg.epochs`, shuffling with a stream
/// keyed by `stage`. Returns per-epoch mean loss.
pub(crate) fn fit<I, F>(
    params: &mut ParamStore<f32>,
    items: &[I],
    cfg: &HarnessConfig,
    seed: u64,
    stage: &str,
    exec: Execution,
    grad: F,
) -> Result<Vec<f64>>
where
    I: Sync,
    F: Fn(&ParamStore<f32>, &I) -> (f64, ParamGrads<f32>) + Sync + Send,
{
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..Default::default() }, params);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(seed, stage, &epoch.to_string()));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let refs: Vec<&I> = batch.iter().map(|&i| &items[i]).collect();
            let p: &ParamStore<f32> = params;
            let (loss, mut g) = batch_gradient(p, &refs, exec, |item| grad(p, item));
            if !loss.is_finite() || !g.all_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            opt.step(params, &mut g);
            total += loss * batch.len() as f64;
            step += 1;
        }
        losses.push(total / items.len().max(1) as f64);
        tracing::debug!(stage, epoch, loss = losses[epoch], "downstream epoch");
    }
    Ok(losses)
}
