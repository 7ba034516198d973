//! Long-document classification where the label is carried by one short
//! span ("needle") hidden among filler and decoy label words.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{argmax, fit, HarnessConfig, ImportanceSource, Metrics, MetricsReport};
use crate::autograd::{Graph, ParamGrads, ParamStore, Var};
use crate::corpus_io::{TokenizedDocument, Vocabulary};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::fusion::{fuse_representation_graph, FusionSpec};
use crate::nn::{xavier, Linear};
use crate::rng;
use crate::tensor::{Mat, Scalar};

pub const MARKER: &str = "key";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeedleTask {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub n_labels: usize,
    pub noise_vocab: usize,
    /// Occurrences of every label word per document, counting the needle.
    pub label_word_count: usize,
}

impl Default for NeedleTask {
    fn default() -> Self {
        Self { seed: 0, n_train: 2000, n_test: 200, min_len: 70, max_len: 150, n_labels: 4, noise_vocab: 60, label_word_count: 2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeedleExample {
    pub doc: TokenizedDocument,
    pub label: usize,
    /// Inclusive token span of the marker and its label word.
    pub needle: [usize; 2],
}

impl NeedleExample {
    /// One-token span of the label word inside the needle.
    pub fn label_word(&self) -> [usize; 2] {
        [self.needle[1], self.needle[1]]
    }
}

#[derive(Clone, Debug)]
pub struct NeedleData {
    pub vocab: Vocabulary,
    pub train: Vec<NeedleExample>,
    pub test: Vec<NeedleExample>,
}

fn label_word(k: usize) -> String {
    format!("l{k}")
}

impl NeedleTask {
    pub fn validate(&self) -> Result<()> {
        let ok = self.min_len >= 2
            && self.min_len <= self.max_len
            && self.n_labels >= 2
            && self.noise_vocab >= 1
            && self.label_word_count >= 1
            && self.n_labels * self.label_word_count + 1 <= self.min_len;
        if !ok {
            return Err(Error::InvalidArgument(format!("inconsistent needle task {self:?}")));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        let words = (0..self.noise_vocab)
            .map(|i| format!("w{i}"))
            .chain(std::iter::once(MARKER.to_string()))
            .chain((0..self.n_labels).map(label_word));
        Vocabulary::from_tokens(words)
    }

    fn example(&self, vocab: &Vocabulary, id: String) -> NeedleExample {
        let mut r = rng::stream(self.seed, "needle-task", &id);
        let n = r.gen_range(self.min_len..=self.max_len);
        let label = r.gen_range(0..self.n_labels);
        let start = r.gen_range(0..n - 1);
        let mut tokens: Vec<String> = (0..n).map(|_| format!("w{}", r.gen_range(0..self.noise_vocab))).collect();
        tokens[start] = MARKER.into();
        tokens[start + 1] = label_word(label);
        let mut free: Vec<usize> = (0..n).filter(|&i| i != start && i != start + 1).collect();
        free.shuffle(&mut r);
        let mut slots = free.into_iter();
        for k in 0..self.n_labels {
            let decoys = self.label_word_count - usize::from(k == label);
            for _ in 0..decoys {
                tokens[slots.next().unwrap()] = label_word(k);
            }
        }
        let ids = tokens.iter().map(|t| vocab.id(t)).collect();
        NeedleExample { doc: TokenizedDocument { doc_id: id, tokens, ids }, label, needle: [start, start + 1] }
    }

    pub fn generate(&self) -> Result<NeedleData> {
        self.validate()?;
        let vocab = self.vocabulary();
        let train = (0..self.n_train).map(|i| self.example(&vocab, format!("train-{i}"))).collect();
        let test = (0..self.n_test).map(|i| self.example(&vocab, format!("test-{i}"))).collect();
        Ok(NeedleData { vocab, train, test })
    }
}

/// Bidirectional tanh recurrent encoder; the context is the sum of the
/// concatenated forward/backward states, followed by a two-layer MLP.
struct BiRnnClassifier {
    params: ParamStore<f32>,
    embedding: usize,
    fwd_in: Linear,
    fwd_rec: usize,
    bwd_in: Linear,
    bwd_rec: usize,
    mlp: Linear,
    out: Linear,
}

impl BiRnnClassifier {
    fn init(vocab_size: usize, labels: usize, cfg: &HarnessConfig, seed: u64) -> Self {
        let mut r = rng::stream(seed, "needle-classifier", "init");
        let mut params = ParamStore::new();
        let (e, h) = (cfg.embed_dim, cfg.hidden);
        let embedding = params.push("embedding", Mat::from_fn(vocab_size, e, |_, _| r.gen_range(-0.1..0.1)));
        let fwd_in = Linear::new(&mut params, "fwd.input", e, h, &mut r);
        let fwd_rec = params.push("fwd.recurrent", xavier(&mut r, h, h));
        let bwd_in = Linear::new(&mut params, "bwd.input", e, h, &mut r);
        let bwd_rec = params.push("bwd.recurrent", xavier(&mut r, h, h));
        let mlp = Linear::new(&mut params, "mlp", 2 * h, h, &mut r);
        let out = Linear::new(&mut params, "out", h, labels, &mut r);
        Self { params, embedding, fwd_in, fwd_rec, bwd_in, bwd_rec, mlp, out }
    }

    fn run_direction<T: Scalar>(&self, g: &mut Graph<T>, x: Var, input: Linear, rec: usize, reverse: bool) -> Var {
        let n = g.value(x).rows;
        let pre = input.forward(g, x);
        let rec = g.param(rec);
        let mut states = vec![None; n];
        let mut prev: Option<Var> = None;
        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        for t in order {
            let xt = g.slice_rows(pre, t, 1);
            let z = match prev {
                Some(h) => {
                    let carried = g.matmul(h, rec);
                    g.add(xt, carried)
                }
                None => xt,
            };
            let h = g.tanh(z);
            states[t] = Some(h);
            prev = Some(h);
        }
        let rows: Vec<Var> = states.into_iter().map(Option::unwrap).collect();
        g.concat_rows(&rows)
    }

    /// `N × 2h` per-token states.
    fn states<T: Scalar>(&self, g: &mut Graph<T>, ids: &[usize]) -> Var {
        let table = g.param(self.embedding);
        let x = g.gather(table, ids);
        let f = self.run_direction(g, x, self.fwd_in, self.fwd_rec, false);
        let b = self.run_direction(g, x, self.bwd_in, self.bwd_rec, true);
        g.concat_cols(&[f, b])
    }

    /// `1 × labels` logits; `fusion` carries the importance and λ.
    fn logits<T: Scalar>(&self, g: &mut Graph<T>, ids: &[usize], fusion: Option<(&[f64], f64)>) -> Var {
        let s = self.states(g, ids);
        let c = match fusion {
            None => g.sum_rows(s),
            Some((p, lambda)) => fuse_representation_graph(g, s, p, lambda),
        };
        let h = self.mlp.forward(g, c);
        let h = g.gelu(h);
        self.out.forward(g, h)
    }
}

struct Item<'a> {
    ex: &'a NeedleExample,
    p: Vec<f64>,
}

fn items<'a>(set: &'a [NeedleExample], importance: ImportanceSource) -> Result<Vec<Item<'a>>> {
    set.iter().map(|ex| Ok(Item { p: importance.weights(&ex.doc, &[ex.label_word()])?, ex })).collect()
}

fn item_grad(model: &BiRnnClassifier, params: &ParamStore<f32>, item: &Item, lambda: Option<f64>) -> (f64, ParamGrads<f32>) {
    let mut g = Graph::new(params);
    let logits = model.logits(&mut g, &item.ex.doc.ids, lambda.map(|l| (item.p.as_slice(), l)));
    let loss = g.index_ce(logits, &[item.ex.label]);
    let mut grads = params.zero_grads();
    g.backward(loss, &mut grads);
    (g.value(loss).data[0] as f64, grads)
}

fn train_and_score(
    data: &NeedleData,
    train: &[Item],
    test: &[Item],
    labels: usize,
    cfg: &HarnessConfig,
    seed: u64,
    lambda: Option<f64>,
    exec: Execution,
) -> Result<f64> {
    let mut model = BiRnnClassifier::init(data.vocab.size(), labels, cfg, seed);
    let mut params = std::mem::take(&mut model.params);
    fit(&mut params, train, cfg, seed, "needle-shuffle", exec, |p, item| item_grad(&model, p, item, lambda))?;
    model.params = params;
    let correct: Vec<bool> = exec.map(test, |item| {
        let mut g = Graph::new(&model.params);
        let logits = model.logits(&mut g, &item.ex.doc.ids, lambda.map(|l| (item.p.as_slice(), l)));
        let row: Vec<f64> = g.value(logits).data.iter().map(|&v| v as f64).collect();
        argmax(&row) == item.ex.label
    });
    Ok(correct.iter().filter(|&&c| c).count() as f64 / test.len().max(1) as f64)
}

/// Trains the recurrent classifier twice from the same initialization and
/// data order, once on `Σ s_n` and once on the fused context, and reports
/// test accuracy of both.
pub fn run_classification(
    task: &NeedleTask,
    importance: ImportanceSource,
    spec: &FusionSpec,
    cfg: &HarnessConfig,
    exec: Execution,
) -> Result<MetricsReport> {
    spec.validate()?;
    let data = task.generate()?;
    let train = items(&data.train, importance)?;
    let test = items(&data.test, importance)?;
    let baseline = train_and_score(&data, &train, &test, task.n_labels, cfg, task.seed, None, exec)?;
    let fused = train_and_score(&data, &train, &test, task.n_labels, cfg, task.seed, Some(spec.lambda_repr), exec)?;
    tracing::info!(seed = task.seed, baseline, fused, importance = importance.label(), "needle classification");
    Ok(MetricsReport {
        task: "needle".into(),
        seed: task.seed,
        importance: importance.label().into(),
        lambda_repr: spec.lambda_repr,
        lambda_score: spec.lambda_score,
        baseline: Metrics { accuracy: Some(baseline), ..Default::default() },
        fused: Metrics { accuracy: Some(fused), ..Default::default() },
    })
}
