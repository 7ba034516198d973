//! Question answering over a handful of passages: a selector ranks passages
//! and a reader scores answer start/end positions in the relevant one.
//!
//! Every passage mentions the question topic, the answer marker and the
//! answer word. Only in the relevant passage do they form a contiguous
//! phrase, so the bag of words does not identify it.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{argmax, fit, rank_of, HarnessConfig, ImportanceSource, Metrics, MetricsReport};
use crate::autograd::{Graph, ParamGrads, ParamStore, Var};
use crate::corpus_io::{split_tokens, Passage, QaRecord, TokenizedDocument, Vocabulary, PAD_ID};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::fusion::{fuse_representation_graph, fuse_scores, FusionSpec, ScoreVector};
use crate::nn::Linear;
use crate::rng;
use crate::tensor::{Mat, Scalar};

pub const ANSWER_MARKER: &str = "is";
const QUESTION_WORD: &str = "which";
/// Longest answer span the reader may predict.
const MAX_SPAN: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PassageTask {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub distractors: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub topics: usize,
    pub answers: usize,
    pub fillers: usize,
}

impl Default for PassageTask {
    fn default() -> Self {
        Self { seed: 0, n_train: 300, n_test: 200, distractors: 4, min_len: 20, max_len: 40, topics: 40, answers: 40, fillers: 100 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Question {
    pub id: String,
    pub question: TokenizedDocument,
    pub passages: Vec<TokenizedDocument>,
    pub relevant: usize,
    /// Inclusive answer span inside the relevant passage.
    pub answer: [usize; 2],
}

impl Question {
    fn gold(&self, k: usize) -> Vec<[usize; 2]> {
        if k == self.relevant {
            vec![self.answer]
        } else {
            Vec::new()
        }
    }
}

#[derive(Clone, Debug)]
pub struct PassageData {
    pub vocab: Vocabulary,
    pub records: Vec<QaRecord>,
    pub train: Vec<Question>,
    pub test: Vec<Question>,
}

impl PassageTask {
    pub fn validate(&self) -> Result<()> {
        // distractors need room for three pairwise non-adjacent slots
        let ok = self.min_len >= 5 && self.min_len <= self.max_len && self.topics >= 1 && self.answers >= 1 && self.fillers >= 1;
        if !ok {
            return Err(Error::InvalidArgument(format!("inconsistent passage task {self:?}")));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        let words = [QUESTION_WORD.to_string(), ANSWER_MARKER.to_string()]
            .into_iter()
            .chain((0..self.topics).map(|i| format!("t{i}")))
            .chain((0..self.answers).map(|i| format!("a{i}")))
            .chain((0..self.fillers).map(|i| format!("f{i}")));
        Vocabulary::from_tokens(words)
    }

    fn record(&self, id: String) -> QaRecord {
        let mut r = rng::stream(self.seed, "passage-task", &id);
        let topic = format!("t{}", r.gen_range(0..self.topics));
        let answer = format!("a{}", r.gen_range(0..self.answers));
        let relevant = r.gen_range(0..=self.distractors);
        let passages = (0..=self.distractors)
            .map(|k| {
                let n = r.gen_range(self.min_len..=self.max_len);
                let mut tokens: Vec<String> = (0..n).map(|_| format!("f{}", r.gen_range(0..self.fillers))).collect();
                let slots = if k == relevant {
                    let s = r.gen_range(0..=n - 3);
                    vec![s, s + 1, s + 2]
                } else {
                    loop {
                        let mut pick: Vec<usize> = rand::seq::index::sample(&mut r, n, 3).into_vec();
                        pick.sort_unstable();
                        if pick[1] > pick[0] + 1 && pick[2] > pick[1] + 1 {
                            pick.shuffle(&mut r);
                            break pick;
                        }
                    }
                };
                tokens[slots[0]] = topic.clone();
                tokens[slots[1]] = ANSWER_MARKER.into();
                tokens[slots[2]] = answer.clone();
                let spans = if k == relevant { vec![[slots[2], slots[2]]] } else { Vec::new() };
                Passage { text: tokens.join(" "), has_answer: k == relevant, answer_spans: spans }
            })
            .collect();
        QaRecord { id, question: format!("{QUESTION_WORD} {topic}"), passages }
    }

    pub fn generate(&self) -> Result<PassageData> {
        self.validate()?;
        let vocab = self.vocabulary();
        let records: Vec<QaRecord> = (0..self.n_train)
            .map(|i| self.record(format!("train-{i}")))
            .chain((0..self.n_test).map(|i| self.record(format!("test-{i}"))))
            .collect();
        let questions = records.iter().map(|rec| question_from_record(rec, &vocab)).collect::<Result<Vec<_>>>()?;
        let mut questions = questions.into_iter();
        let train = questions.by_ref().take(self.n_train).collect();
        let test = questions.collect();
        Ok(PassageData { vocab, records, train, test })
    }
}

fn tokenized(id: String, text: &str, vocab: &Vocabulary) -> Result<TokenizedDocument> {
    let tokens = split_tokens(text);
    if tokens.is_empty() {
        return Err(Error::EmptyInput);
    }
    let ids = tokens.iter().map(|t| vocab.id(t)).collect();
    Ok(TokenizedDocument { doc_id: id, tokens, ids })
}

/// Requires exactly one passage with an answer span.
pub fn question_from_record(rec: &QaRecord, vocab: &Vocabulary) -> Result<Question> {
    let question = tokenized(rec.id.clone(), &rec.question, vocab)?;
    let passages = rec
        .passages
        .iter()
        .enumerate()
        .map(|(k, p)| tokenized(format!("{}#{k}", rec.id), &p.text, vocab))
        .collect::<Result<Vec<_>>>()?;
    let answered: Vec<usize> = rec.passages.iter().enumerate().filter(|(_, p)| p.has_answer).map(|(k, _)| k).collect();
    let [relevant] = answered[..] else {
        return Err(Error::InvalidArgument(format!("question {} needs exactly one answered passage", rec.id)));
    };
    let answer = *rec.passages[relevant]
        .answer_spans
        .first()
        .ok_or_else(|| Error::InvalidArgument(format!("question {} has no answer span", rec.id)))?;
    if answer[1] >= passages[relevant].n_tokens() || answer[0] > answer[1] {
        return Err(Error::IndexOutOfRange { index: answer[1], len: passages[relevant].n_tokens() });
    }
    Ok(Question { id: rec.id.clone(), question, passages, relevant, answer })
}

/// Shared embedding with windowed token states `[e_{t-1}; e_t; e_{t+1}]`
/// and a projected mean-of-embeddings question vector.
struct WindowEncoder {
    embedding: usize,
    question: Linear,
}

impl WindowEncoder {
    fn init(params: &mut ParamStore<f32>, vocab: usize, cfg: &HarnessConfig, r: &mut rand_chacha::ChaCha8Rng) -> Self {
        let embedding = params.push("embedding", Mat::from_fn(vocab, cfg.embed_dim, |_, _| r.gen_range(-0.1..0.1)));
        let question = Linear::new(params, "question", cfg.embed_dim, cfg.hidden, r);
        Self { embedding, question }
    }

    fn states<T: Scalar>(&self, g: &mut Graph<T>, ids: &[usize]) -> Var {
        let n = ids.len();
        let prev: Vec<usize> = (0..n).map(|t| if t == 0 { PAD_ID } else { ids[t - 1] }).collect();
        let next: Vec<usize> = (0..n).map(|t| if t + 1 == n { PAD_ID } else { ids[t + 1] }).collect();
        let table = g.param(self.embedding);
        let parts = [g.gather(table, &prev), g.gather(table, ids), g.gather(table, &next)];
        g.concat_cols(&parts)
    }

    fn question<T: Scalar>(&self, g: &mut Graph<T>, ids: &[usize]) -> Var {
        let table = g.param(self.embedding);
        let e = g.gather(table, ids);
        let sum = g.sum_rows(e);
        let mean = g.scale(sum, T::of(1.0 / ids.len() as f64));
        self.question.forward(g, mean)
    }
}

struct Selector {
    params: ParamStore<f32>,
    enc: WindowEncoder,
    proj: Linear,
}

impl Selector {
    fn init(vocab: usize, cfg: &HarnessConfig, seed: u64) -> Self {
        let mut r = rng::stream(seed, "passage-selector", "init");
        let mut params = ParamStore::new();
        let enc = WindowEncoder::init(&mut params, vocab, cfg, &mut r);
        let proj = Linear::new(&mut params, "proj", 3 * cfg.embed_dim, cfg.hidden, &mut r);
        Self { params, enc, proj }
    }

    /// `1 × passages` relevance scores.
    fn scores<T: Scalar>(&self, g: &mut Graph<T>, q: &Question, p: &[Vec<f64>], lambda: Option<f64>) -> Var {
        let qv = self.enc.question(g, &q.question.ids);
        let cols: Vec<Var> = q
            .passages
            .iter()
            .zip(p)
            .map(|(doc, w)| {
                let s = self.enc.states(g, &doc.ids);
                let c = match lambda {
                    None => g.sum_rows(s),
                    Some(l) => fuse_representation_graph(g, s, w, l),
                };
                let proj = self.proj.forward(g, c);
                g.matmul_t(proj, qv)
            })
            .collect();
        g.concat_cols(&cols)
    }
}

struct Reader {
    params: ParamStore<f32>,
    enc: WindowEncoder,
    start: Linear,
    end: Linear,
}

impl Reader {
    fn init(vocab: usize, cfg: &HarnessConfig, seed: u64) -> Self {
        let mut r = rng::stream(seed, "span-reader", "init");
        let mut params = ParamStore::new();
        let enc = WindowEncoder::init(&mut params, vocab, cfg, &mut r);
        let start = Linear::new(&mut params, "start", 3 * cfg.embed_dim, cfg.hidden, &mut r);
        let end = Linear::new(&mut params, "end", 3 * cfg.embed_dim, cfg.hidden, &mut r);
        Self { params, enc, start, end }
    }

    /// `1 × N` start and end scores over a passage.
    fn scores<T: Scalar>(&self, g: &mut Graph<T>, question: &[usize], passage: &[usize]) -> (Var, Var) {
        let qv = self.enc.question(g, question);
        let s = self.enc.states(g, passage);
        let hs = self.start.forward(g, s);
        let he = self.end.forward(g, s);
        (g.matmul_t(qv, hs), g.matmul_t(qv, he))
    }
}

struct Item<'a> {
    q: &'a Question,
    p: Vec<Vec<f64>>,
}

fn items<'a>(set: &'a [Question], importance: ImportanceSource) -> Result<Vec<Item<'a>>> {
    set.iter()
        .map(|q| {
            let p = q.passages.iter().enumerate().map(|(k, d)| importance.weights(d, &q.gold(k))).collect::<Result<_>>()?;
            Ok(Item { q, p })
        })
        .collect()
}

fn loss_and_grads(g: &Graph<f32>, loss: Var, params: &ParamStore<f32>) -> (f64, ParamGrads<f32>) {
    let mut grads = params.zero_grads();
    g.backward(loss, &mut grads);
    (g.value(loss).data[0] as f64, grads)
}

fn selection_metrics(
    data: &PassageData,
    train: &[Item],
    test: &[Item],
    cfg: &HarnessConfig,
    seed: u64,
    lambda: Option<f64>,
    exec: Execution,
) -> Result<Metrics> {
    let mut model = Selector::init(data.vocab.size(), cfg, seed);
    let mut params = std::mem::take(&mut model.params);
    fit(&mut params, train, cfg, seed, "selector-shuffle", exec, |ps, item| {
        let mut g = Graph::new(ps);
        let s = model.scores(&mut g, item.q, &item.p, lambda);
        let loss = g.index_ce(s, &[item.q.relevant]);
        loss_and_grads(&g, loss, ps)
    })?;
    model.params = params;
    let ranks: Vec<usize> = exec.map(test, |item| {
        let mut g = Graph::new(&model.params);
        let s = model.scores(&mut g, item.q, &item.p, lambda);
        let row: Vec<f64> = g.value(s).data.iter().map(|&v| v as f64).collect();
        rank_of(&row, item.q.relevant)
    });
    let hit = |n: usize| ranks.iter().filter(|&&r| r < n).count() as f64 / ranks.len().max(1) as f64;
    Ok(Metrics { hit_at_1: Some(hit(1)), hit_at_3: Some(hit(3)), hit_at_5: Some(hit(5)), ..Default::default() })
}

/// Trains the passage selector with and without representation fusion from
/// the same initialization and reports Hit@1/3/5 on the test questions.
pub fn run_passage_selection(
    task: &PassageTask,
    importance: ImportanceSource,
    spec: &FusionSpec,
    cfg: &HarnessConfig,
    exec: Execution,
) -> Result<MetricsReport> {
    spec.validate()?;
    let data = task.generate()?;
    let train = items(&data.train, importance)?;
    let test = items(&data.test, importance)?;
    let baseline = selection_metrics(&data, &train, &test, cfg, task.seed, None, exec)?;
    let fused = selection_metrics(&data, &train, &test, cfg, task.seed, Some(spec.lambda_repr), exec)?;
    tracing::info!(seed = task.seed, base = baseline.hit_at_1, fused = fused.hit_at_1, "passage selection");
    Ok(MetricsReport {
        task: "select".into(),
        seed: task.seed,
        importance: importance.label().into(),
        lambda_repr: spec.lambda_repr,
        lambda_score: spec.lambda_score,
        baseline,
        fused,
    })
}

/// Highest-scoring `(start, end)` with `start <= end < start + MAX_SPAN`.
fn best_span(start: &[f64], end: &[f64]) -> [usize; 2] {
    let s = argmax(start);
    let stop = (s + MAX_SPAN).min(end.len());
    [s, s + argmax(&end[s..stop])]
}

/// Trains the span reader on relevant passages without fusion, then
/// predicts spans from raw scores and from scores fused with the
/// importance distribution; reports exact match of both.
pub fn run_span_scoring(
    task: &PassageTask,
    importance: ImportanceSource,
    spec: &FusionSpec,
    cfg: &HarnessConfig,
    exec: Execution,
) -> Result<MetricsReport> {
    spec.validate()?;
    let data = task.generate()?;
    let mut model = Reader::init(data.vocab.size(), cfg, task.seed);
    let mut params = std::mem::take(&mut model.params);
    fit(&mut params, &data.train, cfg, task.seed, "reader-shuffle", exec, |ps, q| {
        let mut g = Graph::new(ps);
        let (s, e) = model.scores(&mut g, &q.question.ids, &q.passages[q.relevant].ids);
        let ls = g.index_ce(s, &[q.answer[0]]);
        let le = g.index_ce(e, &[q.answer[1]]);
        let loss = g.add(ls, le);
        loss_and_grads(&g, loss, ps)
    })?;
    model.params = params;
    let hits: Vec<Result<(bool, bool)>> = exec.map(&data.test, |q| {
        let passage = &q.passages[q.relevant];
        let mut g = Graph::new(&model.params);
        let (s, e) = model.scores(&mut g, &q.question.ids, &passage.ids);
        let raw = |v: Var| ScoreVector::new(g.value(v).data.iter().map(|&x| x as f64).collect());
        let (rs, re) = (raw(s)?, raw(e)?);
        let p = importance.weights(passage, &[q.answer])?;
        let fs = fuse_scores(&rs, &p, spec)?;
        let fe = fuse_scores(&re, &p, spec)?;
        Ok((best_span(&rs.scores, &re.scores) == q.answer, best_span(&fs.scores, &fe.scores) == q.answer))
    });
    let mut base = 0usize;
    let mut fused = 0usize;
    for h in hits {
        let (b, f) = h?;
        base += usize::from(b);
        fused += usize::from(f);
    }
    let n = data.test.len().max(1) as f64;
    Ok(MetricsReport {
        task: "span".into(),
        seed: task.seed,
        importance: importance.label().into(),
        lambda_repr: spec.lambda_repr,
        lambda_score: spec.lambda_score,
        baseline: Metrics { exact_match: Some(base as f64 / n), ..Default::default() },
        fused: Metrics { exact_match: Some(fused as f64 / n), ..Default::default() },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PassageTask {
        PassageTask { n_train: 20, n_test: 10, ..Default::default() }
    }

    #[test]
    fn generator_invariants() {
        let data = PassageTask::default().generate().unwrap();
        for q in data.train.iter().chain(&data.test) {
            assert_eq!(q.passages.len(), 5);
            let rel = &q.passages[q.relevant];
            assert_eq!(rel.tokens[q.answer[0] - 1], ANSWER_MARKER);
            let topic = &q.question.tokens[1];
            let answer = &rel.tokens[q.answer[0]];
            for (k, p) in q.passages.iter().enumerate() {
                assert!((20..=40).contains(&p.n_tokens()));
                let at = |w: &str| p.tokens.iter().position(|t| t == w).unwrap();
                let (t, m, a) = (at(topic), at(ANSWER_MARKER), at(answer));
                assert_eq!(p.tokens.iter().filter(|t| *t == ANSWER_MARKER).count(), 1);
                assert_eq!(t + 1 == m && m + 1 == a, k == q.relevant);
            }
        }
        for rec in &data.records {
            assert_eq!(rec.passages.iter().filter(|p| p.has_answer).count(), 1);
        }
    }

    #[test]
    fn single_candidate_always_hits() {
        let task = PassageTask { distractors: 0, ..small() };
        let cfg = HarnessConfig { epochs: 1, ..Default::default() };
        let rep = run_passage_selection(&task, ImportanceSource::Uniform, &FusionSpec::default(), &cfg, Execution::Sequential).unwrap();
        assert_eq!(rep.baseline.hit_at_1, Some(1.0));
        assert_eq!(rep.fused.hit_at_1, Some(1.0));
    }

    #[test]
    fn zero_lambdas_are_identities() {
        let cfg = HarnessConfig { epochs: 1, ..Default::default() };
        let spec = FusionSpec::off();
        let sel = run_passage_selection(&small(), ImportanceSource::Oracle, &spec, &cfg, Execution::Parallel).unwrap();
        assert_eq!(sel.baseline, sel.fused);
        let hits = [sel.fused.hit_at_1.unwrap(), sel.fused.hit_at_3.unwrap(), sel.fused.hit_at_5.unwrap()];
        assert!(hits[0] <= hits[1] && hits[1] <= hits[2]);
        let span = run_span_scoring(&small(), ImportanceSource::Oracle, &spec, &cfg, Execution::Parallel).unwrap();
        assert_eq!(span.baseline, span.fused);
    }

    #[test]
    fn full_weight_on_one_hot_gold_recovers_answer() {
        let cfg = HarnessConfig { epochs: 1, ..Default::default() };
        let spec = FusionSpec { lambda_score: 1.0, ..Default::default() };
        let rep = run_span_scoring(&small(), ImportanceSource::Oracle, &spec, &cfg, Execution::Sequential).unwrap();
        assert_eq!(rep.fused.exact_match, Some(1.0));
    }

    #[test]
    fn record_without_answer_is_rejected() {
        let mut rec = PassageTask::default().record("x".into());
        for p in &mut rec.passages {
            p.has_answer = false;
        }
        assert!(question_from_record(&rec, &PassageTask::default().vocabulary()).is_err());
    }
}
