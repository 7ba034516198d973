use std::path::Path;

use rand::seq::SliceRandom;

use super::{AttentionSource, TeacherConfig, TraceMode};
use crate::autograd::{Graph, ParamStore, Var};
use crate::corpus_io::{
    read_checkpoint, tokenize, write_checkpoint, AttentionTrace, Checkpoint, EmbeddingTable, SummarizationRecord,
    TokenizedDocument, Vocabulary,
};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::nn::{causal_mask, DecoderLayer, EncoderLayer, Linear};
use crate::optim::{batch_gradient, Adam, AdamConfig};
use crate::rng;
use crate::tensor::{sinusoidal_table, Mat, Scalar};

pub const TEACHER_CHECKPOINT_KIND: &str = "toy_teacher";

#[derive(Clone, Debug)]
struct Layout {
    embedding: usize,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    out: Linear,
}

/// A small transformer encoder-decoder summarizer. The output vocabulary
/// is the shared vocabulary plus begin/end-of-summary symbols.
#[derive(Clone, Debug)]
pub struct ToyTeacher {
    config: TeacherConfig,
    vocab: Vocabulary,
    params: ParamStore<f32>,
    layout: Layout,
    positions: Mat<f32>,
}

struct Example {
    key: String,
    source: Vec<usize>,
    summary: Vec<usize>,
}

impl ToyTeacher {
    pub fn init(vocab: &Vocabulary, config: &TeacherConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_size;
        let mut rng = rng::stream(seed, "teacher-init", "");
        let mut params = ParamStore::new();
        let out_vocab = Vocabulary::from_tokens(vocab.tokens().iter().skip(2).map(String::as_str).chain(["<bos>", "<eos>"]));
        let embedding = params.push("embedding", EmbeddingTable::random(&out_vocab, d, seed).matrix);
        let encoder = (0..config.encoder_layers)
            .map(|l| EncoderLayer::new(&mut params, &format!("encoder.{l}"), d, config.heads, config.ffn_dim, &mut rng))
            .collect();
        let decoder = (0..config.decoder_layers)
            .map(|l| DecoderLayer::new(&mut params, &format!("decoder.{l}"), d, config.heads, config.ffn_dim, &mut rng))
            .collect();
        let out = Linear::new(&mut params, "output", d, vocab.size() + 2, &mut rng);
        Ok(Self {
            config: config.clone(),
            vocab: vocab.clone(),
            params,
            layout: Layout { embedding, encoder, decoder, out },
            positions: sinusoidal_table(config.max_len + 2, d),
        })
    }

    pub fn config(&self) -> &TeacherConfig {
        &self.config
    }

    /// Same weights, traced from a different attention source or mode.
    pub fn with_trace_settings(mut self, source: AttentionSource, mode: TraceMode) -> Result<Self> {
        let config = TeacherConfig { attention_source: source, trace_mode: mode, ..self.config.clone() };
        config.validate()?;
        self.config = config;
        Ok(self)
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn bos(&self) -> usize {
        self.vocab.size()
    }

    pub fn eos(&self) -> usize {
        self.vocab.size() + 1
    }

    fn embed<T: Scalar>(&self, g: &mut Graph<T>, ids: &[usize]) -> Var {
        let d = self.config.hidden_size;
        let table = g.param(self.layout.embedding);
        let e = g.gather(table, ids);
        let e = g.scale(e, T::of((d as f64).sqrt()));
        let pos = Mat::from_vec(ids.len(), d, self.positions.data[..ids.len() * d].iter().map(|&v| T::of(v as f64)).collect());
        let pos = g.input(pos);
        let x = g.add(e, pos);
        g.dropout(x)
    }

    /// Teacher-forced pass. Returns output logits (one row per decoder
    /// input) and the per-layer, per-head cross-attention probabilities.
    fn forward_graph<T: Scalar>(&self, g: &mut Graph<T>, source: &[usize], decoder_in: &[usize]) -> (Var, Vec<Vec<Var>>) {
        let mut memory = self.embed(g, source);
        for layer in &self.layout.encoder {
            memory = layer.forward(g, memory, None);
        }
        let causal = causal_mask(decoder_in.len());
        let mut y = self.embed(g, decoder_in);
        let mut cross = Vec::with_capacity(self.layout.decoder.len());
        for layer in &self.layout.decoder {
            let (next, probs) = layer.forward(g, y, memory, &causal, None);
            y = next;
            cross.push(probs);
        }
        (self.layout.out.forward(g, y), cross)
    }

    fn decoder_io(&self, summary: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let mut input = vec![self.bos()];
        input.extend_from_slice(summary);
        let mut target = summary.to_vec();
        target.push(self.eos());
        (input, target)
    }

    fn example_grad(&self, ex: &Example, dropout_key: Option<&str>) -> (f64, crate::autograd::ParamGrads<f32>) {
        let mut g = Graph::new(&self.params);
        if let Some(key) = dropout_key {
            g = g.with_dropout(self.config.dropout, rng::stream(self.config.seed, "teacher-dropout", key));
        }
        let (input, target) = self.decoder_io(&ex.summary);
        let (logits, _) = self.forward_graph(&mut g, &ex.source, &input);
        let loss = g.index_ce(logits, &target);
        let mut grads = self.params.zero_grads();
        g.backward(loss, &mut grads);
        (g.value(loss).data[0] as f64, grads)
    }

    /// Token-level cross entropy of the gold summary (no dropout).
    pub fn loss(&self, source: &TokenizedDocument, summary: &[usize]) -> f64 {
        let mut g = Graph::new(&self.params);
        let (input, target) = self.decoder_io(summary);
        let (logits, _) = self.forward_graph(&mut g, &source.ids, &input);
        let loss = g.index_ce(logits, &target);
        g.value(loss).data[0] as f64
    }

    fn select_attention(&self, g: &Graph<f32>, cross: &[Vec<Var>], rows: std::ops::Range<usize>) -> Mat<f32> {
        let chosen: Vec<&Mat<f32>> = match self.config.attention_source {
            AttentionSource::FinalLayerMeanHeads => cross.last().unwrap().iter().map(|v| g.value(*v)).collect(),
            AttentionSource::PerLayerMean => cross.iter().flatten().map(|v| g.value(*v)).collect(),
            AttentionSource::LayerMeanHeads { layer } => cross[layer].iter().map(|v| g.value(*v)).collect(),
            AttentionSource::LayerHead { layer, head } => vec![g.value(cross[layer][head])],
        };
        let cols = chosen[0].cols;
        let k = chosen.len() as f64;
        let mut out = Mat::zeros(rows.len(), cols);
        for (oi, r) in rows.enumerate() {
            for c in 0..cols {
                let s: f64 = chosen.iter().map(|m| m.get(r, c) as f64).sum();
                out.set(oi, c, (s / k) as f32);
            }
        }
        out
    }

    /// Cross-attention trace for one document, per the configured
    /// [`TraceMode`]. Teacher-forced traces have one row per gold summary
    /// token plus the end-of-summary step.
    pub fn trace(&self, doc: &TokenizedDocument, summary: &[usize]) -> Result<AttentionTrace> {
        match self.config.trace_mode {
            TraceMode::TeacherForced => self.teacher_forced_trace(doc, summary),
            TraceMode::Greedy => Ok(self.greedy_decode(doc)?.1),
        }
    }

    pub fn teacher_forced_trace(&self, doc: &TokenizedDocument, summary: &[usize]) -> Result<AttentionTrace> {
        self.check_len(doc.n_tokens())?;
        self.check_len(summary.len() + 1)?;
        let mut g = Graph::new(&self.params);
        let (input, _) = self.decoder_io(summary);
        let (_, cross) = self.forward_graph(&mut g, &doc.ids, &input);
        let m = self.select_attention(&g, &cross, 0..input.len());
        AttentionTrace::new(doc.doc_id.clone(), normalize_rows(m))
    }

    /// Greedy decoding; records the attention row of every emitted token
    /// including the end-of-summary step.
    pub fn greedy_decode(&self, doc: &TokenizedDocument) -> Result<(Vec<usize>, AttentionTrace)> {
        self.check_len(doc.n_tokens())?;
        let mut input = vec![self.bos()];
        let mut rows = Vec::new();
        let mut emitted = Vec::new();
        let cap = self.config.max_summary_len.min(self.config.max_len);
        loop {
            let mut g = Graph::new(&self.params);
            let (logits, cross) = self.forward_graph(&mut g, &doc.ids, &input);
            let last = input.len() - 1;
            rows.push(self.select_attention(&g, &cross, last..last + 1));
            let lv = g.value(logits);
            let next = argmax(lv.row(last), |id| id != self.bos());
            if next == self.eos() || emitted.len() + 1 >= cap {
                break;
            }
            emitted.push(next);
            input.push(next);
        }
        let n = doc.n_tokens();
        let data = rows.iter().flat_map(|r| r.data.iter().copied()).collect();
        let trace = AttentionTrace::new(doc.doc_id.clone(), normalize_rows(Mat::from_vec(rows.len(), n, data)))?;
        Ok((emitted, trace))
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        if n > self.config.max_len + 1 {
            return Err(Error::InputTooLong { len: n, max: self.config.max_len });
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: TEACHER_CHECKPOINT_KIND.into(),
            config: serde_json::to_value(&self.config).expect("config serializes"),
            vocab: self.vocab.clone(),
            tensors: self.params.iter().map(|(n, m)| (n.to_string(), m.clone())).collect(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.kind != TEACHER_CHECKPOINT_KIND {
            return Err(Error::MalformedHeader(format!("expected a {TEACHER_CHECKPOINT_KIND} checkpoint, found {:?}", ckpt.kind)));
        }
        let config: TeacherConfig =
            serde_json::from_value(ckpt.config).map_err(|e| Error::MalformedHeader(format!("config: {e}")))?;
        let mut t = Self::init(&ckpt.vocab, &config, 0)?;
        if ckpt.tensors.len() != t.params.len() {
            return Err(Error::ShapeMismatch(format!("config implies {} tensors, checkpoint has {}", t.params.len(), ckpt.tensors.len())));
        }
        for (id, (name, m)) in ckpt.tensors.into_iter().enumerate() {
            if name != t.params.name(id) || m.shape() != t.params.get(id).shape() {
                return Err(Error::ShapeMismatch(format!("tensor {id} ({name}) has shape {:?}", m.shape())));
            }
            *t.params.get_mut(id) = m;
        }
        Ok(t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_checkpoint(&self.to_checkpoint(), path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(read_checkpoint(path)?)
    }
}

/// Head-averaged rows drift from 1 by f32 rounding; renormalize in f64.
fn normalize_rows(mut m: Mat<f32>) -> Mat<f32> {
    for r in 0..m.rows {
        let s: f64 = m.row(r).iter().map(|&v| v as f64).sum();
        for v in m.row_mut(r) {
            *v = ((*v as f64) / s) as f32;
        }
    }
    m
}

fn argmax(row: &[f32], allowed: impl Fn(usize) -> bool) -> usize {
    let mut best = 0;
    let mut best_v = f32::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if allowed(i) && v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// An ensemble of independently seeded teachers plus their training curves.
pub struct TrainedTeacher {
    pub members: Vec<ToyTeacher>,
    /// Mean batch loss at every optimizer step, per member.
    pub step_losses: Vec<Vec<f64>>,
}

/// Trains `config.ensemble_size` teachers on article/summary pairs.
pub fn train_toy_teacher(
    records: &[SummarizationRecord],
    vocab: &Vocabulary,
    config: &TeacherConfig,
    exec: Execution,
) -> Result<TrainedTeacher> {
    config.validate()?;
    if records.is_empty() {
        return Err(Error::InvalidArgument("teacher training needs at least one record".into()));
    }
    let mut examples = Vec::with_capacity(records.len());
    for r in records {
        let source = tokenize(r.id.clone(), &r.article, vocab)?;
        let summary = tokenize(r.id.clone(), &r.summary, vocab)?;
        if source.n_tokens() > config.max_len || summary.n_tokens() + 1 > config.max_len {
            return Err(Error::InputTooLong { len: source.n_tokens().max(summary.n_tokens() + 1), max: config.max_len });
        }
        examples.push(Example { key: r.id.clone(), source: source.ids, summary: summary.ids });
    }
    let mut members = Vec::with_capacity(config.ensemble_size);
    let mut curves = Vec::with_capacity(config.ensemble_size);
    for member in 0..config.ensemble_size {
        let member_cfg = TeacherConfig { seed: config.seed.wrapping_add(member as u64), ..config.clone() };
        let mut teacher = ToyTeacher::init(vocab, &member_cfg, member_cfg.seed)?;
        let adam_cfg = AdamConfig {
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            grad_clip_norm: Some(config.grad_clip_norm),
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(adam_cfg, &teacher.params);
        let mut curve = Vec::new();
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut step = 0usize;
        for epoch in 0..config.epochs {
            order.shuffle(&mut rng::stream(member_cfg.seed, "teacher-shuffle", &epoch.to_string()));
            for chunk in order.chunks(config.batch_size) {
                let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
                let (loss, mut grads) = batch_gradient(&teacher.params, &batch, exec, |ex| {
                    teacher.example_grad(ex, Some(&format!("{epoch}:{step}:{}", ex.key)))
                });
                if !loss.is_finite() || !grads.all_finite() {
                    return Err(Error::Diverged { epoch, step, loss });
                }
                opt.step(&mut teacher.params, &mut grads);
                curve.push(loss);
                step += 1;
            }
        }
        tracing::info!(member, steps = step, final_loss = curve.last().copied().unwrap_or(f64::NAN), "teacher trained");
        members.push(teacher);
        curves.push(curve);
    }
    Ok(TrainedTeacher { members, step_losses: curves })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::teacher::soft_target_from_trace;

    fn small() -> TeacherConfig {
        TeacherConfig {
            hidden_size: 16,
            heads: 2,
            ffn_dim: 32,
            encoder_layers: 1,
            decoder_layers: 1,
            max_len: 32,
            dropout: 0.0,
            batch_size: 4,
            epochs: 1,
            ..TeacherConfig::default()
        }
    }

    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens((0..12).map(|i| format!("w{i}")))
    }

    fn doc(v: &Vocabulary, text: &str) -> TokenizedDocument {
        tokenize("d", text, v).unwrap()
    }

    #[test]
    fn untrained_traces_are_row_stochastic() {
        let v = vocab();
        for source in [
            AttentionSource::FinalLayerMeanHeads,
            AttentionSource::PerLayerMean,
            AttentionSource::LayerMeanHeads { layer: 0 },
            AttentionSource::LayerHead { layer: 0, head: 1 },
        ] {
            let cfg = TeacherConfig { attention_source: source, ..small() };
            let t = ToyTeacher::init(&v, &cfg, 1).unwrap();
            let d = doc(&v, "w1 w2 w3 w4 w5");
            let tr = t.teacher_forced_trace(&d, &[3, 4]).unwrap();
            assert_eq!(tr.t_steps(), 3);
            assert_eq!(tr.n_positions(), 5);
            tr.validate().unwrap();
            let (_, greedy) = t.greedy_decode(&d).unwrap();
            greedy.validate().unwrap();
            assert!(greedy.t_steps() >= 1);
        }
    }

    #[test]
    fn single_example_loss_decreases_over_50_steps() {
        let v = vocab();
        let rec = SummarizationRecord { id: "one".into(), article: "w1 w2 w3 w4 w5 w6".into(), summary: "w1 w2".into() };
        let cfg = TeacherConfig { epochs: 50, batch_size: 1, lr: 1e-3, ..small() };
        let trained = train_toy_teacher(&[rec], &v, &cfg, Execution::Sequential).unwrap();
        let curve = &trained.step_losses[0];
        assert_eq!(curve.len(), 50);
        let head: f64 = curve[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = curve[45..].iter().sum::<f64>() / 5.0;
        assert!(tail < 0.5 * head, "loss {head} -> {tail}");
    }

    #[test]
    fn checkpoint_round_trip_preserves_traces() {
        let v = vocab();
        let t = ToyTeacher::init(&v, &small(), 3).unwrap();
        let back = ToyTeacher::from_checkpoint(t.to_checkpoint()).unwrap();
        let d = doc(&v, "w1 w2 w3");
        assert_eq!(t.teacher_forced_trace(&d, &[2]).unwrap(), back.teacher_forced_trace(&d, &[2]).unwrap());
        let q = soft_target_from_trace(&back.teacher_forced_trace(&d, &[2]).unwrap()).unwrap();
        assert!((q.q.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ensemble_members_differ() {
        let v = vocab();
        let rec = SummarizationRecord { id: "a".into(), article: "w1 w2 w3".into(), summary: "w1".into() };
        let cfg = TeacherConfig { ensemble_size: 2, ..small() };
        let trained = train_toy_teacher(&[rec], &v, &cfg, Execution::Sequential).unwrap();
        assert_eq!(trained.members.len(), 2);
        assert_ne!(trained.members[0].params(), trained.members[1].params());
    }
}
