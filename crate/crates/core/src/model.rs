//! The gist detector: word (and optionally character) embeddings, a
//! four-layer transformer encoder, and a two-layer MLP whose per-position
//! scores are normalized by a softmax over the input.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Var};
use crate::corpus_io::{
    read_checkpoint, write_checkpoint, Checkpoint, EmbeddingTable, TokenizedDocument, Vocabulary, PAD_ID,
};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::nn::{key_mask, EncoderLayer, Linear};
use crate::rng;
use crate::tensor::{sinusoidal_table, Mat, Scalar};

pub const ENCODER_LAYERS: usize = 4;
pub const CHECKPOINT_KIND: &str = "gist_detector";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CharCnnConfig {
    pub char_dim: usize,
    pub filters: usize,
    pub width: usize,
    pub max_word_len: usize,
}

impl Default for CharCnnConfig {
    fn default() -> Self {
        Self { char_dim: 50, filters: 100, width: 5, max_word_len: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub word_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub mlp_hidden: usize,
    pub max_len: usize,
    pub char_cnn: Option<CharCnnConfig>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { word_dim: 100, hidden: 256, heads: 4, ffn_dim: 1024, mlp_hidden: 256, max_len: 512, char_cnn: None }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("word_dim", self.word_dim),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("mlp_hidden", self.mlp_hidden),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::OutOfRange(name.into()));
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::OutOfRange("heads".into()));
        }
        if let Some(c) = &self.char_cnn {
            if c.char_dim == 0 || c.filters == 0 || c.width == 0 || c.max_word_len < c.width {
                return Err(Error::OutOfRange("char_cnn".into()));
            }
        }
        Ok(())
    }
}

/// Per-token importance over a document; a probability simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceDistribution {
    #[serde(rename = "id")]
    pub doc_id: String,
    pub p: Vec<f64>,
}

#[derive(Clone, Debug)]
struct CharBranch {
    chars: Vocabulary,
    table: usize,
    conv: Linear,
    config: CharCnnConfig,
}

#[derive(Clone, Debug)]
struct Layout {
    word_embedding: usize,
    chars: Option<CharBranch>,
    input: Linear,
    layers: Vec<EncoderLayer>,
    head1: Linear,
    head2: Linear,
}

#[derive(Clone, Debug)]
pub struct GistDetector {
    config: DetectorConfig,
    vocab: Vocabulary,
    params: ParamStore<f32>,
    layout: Layout,
    positions: Mat<f32>,
}

/// Characters drawn from the word vocabulary, sorted for determinism.
fn char_vocab(vocab: &Vocabulary) -> Vocabulary {
    let set: BTreeSet<char> = vocab.tokens().iter().skip(2).flat_map(|t| t.chars()).collect();
    Vocabulary::from_tokens(set.into_iter().map(String::from))
}

impl GistDetector {
    /// Seeded initialization; rows of `pretrained` replace the random word
    /// embeddings when given.
    pub fn init(vocab: &Vocabulary, config: &DetectorConfig, seed: u64, pretrained: Option<&EmbeddingTable>) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "gist-detector-init", "");
        let mut params = ParamStore::new();
        let emb = match pretrained {
            Some(t) => {
                if t.dim != config.word_dim || t.matrix.rows != vocab.size() {
                    return Err(Error::ShapeMismatch(format!(
                        "pretrained table {}x{} vs vocabulary {} x word_dim {}",
                        t.matrix.rows,
                        t.dim,
                        vocab.size(),
                        config.word_dim
                    )));
                }
                t.matrix.clone()
            }
            None => EmbeddingTable::random(vocab, config.word_dim, seed).matrix,
        };
        let word_embedding = params.push("word_embedding", emb);
        let chars = config.char_cnn.as_ref().map(|c| {
            let chars = char_vocab(vocab);
            let table = params.push("char_embedding", EmbeddingTable::random(&chars, c.char_dim, seed ^ 0xC4A2).matrix);
            let conv = Linear::new(&mut params, "char_conv", c.width * c.char_dim, c.filters, &mut rng);
            CharBranch { chars, table, conv, config: c.clone() }
        });
        let in_dim = config.word_dim + config.char_cnn.as_ref().map_or(0, |c| c.filters);
        let input = Linear::new(&mut params, "input_proj", in_dim, config.hidden, &mut rng);
        let layers = (0..ENCODER_LAYERS)
            .map(|l| EncoderLayer::new(&mut params, &format!("encoder.{l}"), config.hidden, config.heads, config.ffn_dim, &mut rng))
            .collect();
        let head1 = Linear::new(&mut params, "head.0", config.hidden, config.mlp_hidden, &mut rng);
        let head2 = Linear::new(&mut params, "head.1", config.mlp_hidden, 1, &mut rng);
        Ok(Self {
            config: config.clone(),
            vocab: vocab.clone(),
            params,
            layout: Layout { word_embedding, chars, input, layers, head1, head2 },
            positions: sinusoidal_table(config.max_len, config.hidden),
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    /// Zeroes the positional table; used by symmetry tests.
    pub fn without_positions(mut self) -> Self {
        self.positions = Mat::zeros(self.positions.rows, self.positions.cols);
        self
    }

    pub fn check_length(&self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        if n > self.config.max_len {
            return Err(Error::InputTooLong { len: n, max: self.config.max_len });
        }
        Ok(())
    }

    fn char_features<T: Scalar>(&self, g: &mut Graph<T>, branch: &CharBranch, tokens: &[Option<&str>]) -> Var {
        let c = &branch.config;
        let table = g.param(branch.table);
        let mut rows = Vec::with_capacity(tokens.len());
        for tok in tokens {
            let mut ids: Vec<usize> = tok
                .map(|t| t.chars().take(c.max_word_len).map(|ch| branch.chars.id(&ch.to_string())).collect())
                .unwrap_or_default();
            ids.resize(ids.len().max(c.width), PAD_ID);
            let emb = g.gather(table, &ids);
            let windows: Vec<Var> = (0..=ids.len() - c.width)
                .map(|s| {
                    let cols: Vec<Var> = (0..c.width).map(|k| g.slice_rows(emb, s + k, 1)).collect();
                    g.concat_cols(&cols)
                })
                .collect();
            let unfolded = g.concat_rows(&windows);
            let conv = branch.conv.forward(g, unfolded);
            let conv = g.tanh(conv);
            rows.push(g.max_rows(conv));
        }
        g.concat_rows(&rows)
    }

    /// Builds the forward pass for one (possibly padded) sequence and
    /// returns the `1 × L` pre-softmax scores and the final hidden states.
    pub fn logits<T: Scalar>(&self, g: &mut Graph<T>, ids: &[usize], valid: &[bool]) -> (Var, Var) {
        let l = &self.layout;
        let table = g.param(l.word_embedding);
        let mut x = g.gather(table, ids);
        if let Some(branch) = &l.chars {
            let toks: Vec<Option<&str>> = ids.iter().zip(valid).map(|(&id, &ok)| if ok { self.vocab.token(id) } else { None }).collect();
            let cf = self.char_features(g, branch, &toks);
            x = g.concat_cols(&[x, cf]);
        }
        let h = l.input.forward(g, x);
        // bring token features to the scale of the positional table
        let h = g.scale(h, T::of((self.config.hidden as f64).sqrt()));
        let pos = Mat::from_vec(ids.len(), self.config.hidden, self.positions.data[..ids.len() * self.config.hidden].iter().map(|&v| T::of(v as f64)).collect());
        let pos = g.input(pos);
        let h = g.add(h, pos);
        let mut h = g.dropout(h);
        let mask = key_mask(valid);
        for layer in &l.layers {
            h = layer.forward(g, h, mask.as_ref());
        }
        let z = l.head1.forward(g, h);
        let z = g.softplus(z);
        let z = l.head2.forward(g, z);
        (g.transpose(z), h)
    }

    /// Inference on a single document (dropout disabled).
    pub fn forward(&self, doc: &TokenizedDocument) -> Result<ImportanceDistribution> {
        Ok(self.forward_with_hidden(doc)?.0)
    }

    /// Inference returning the final encoder states alongside `p`.
    pub fn forward_with_hidden(&self, doc: &TokenizedDocument) -> Result<(ImportanceDistribution, Mat<f32>)> {
        self.check_length(doc.n_tokens())?;
        let valid = vec![true; doc.n_tokens()];
        let (p, h) = self.padded_forward(&doc.ids, &valid);
        Ok((ImportanceDistribution { doc_id: doc.doc_id.clone(), p }, h))
    }

    fn padded_forward(&self, ids: &[usize], valid: &[bool]) -> (Vec<f64>, Mat<f32>) {
        let mut g = Graph::new(&self.params);
        let (logits, h) = self.logits(&mut g, ids, valid);
        let p = masked_softmax(&g.value(logits).data, valid);
        (p, g.value(h).clone())
    }

    /// Batched inference: documents are padded to the longest member and
    /// masked. Each output covers exactly its document's tokens.
    pub fn forward_batch(&self, docs: &[TokenizedDocument], exec: Execution) -> Result<Vec<ImportanceDistribution>> {
        for d in docs {
            self.check_length(d.n_tokens())?;
        }
        let width = docs.iter().map(TokenizedDocument::n_tokens).max().unwrap_or(0);
        Ok(exec.map(docs, |d| {
            let (ids, valid) = pad(&d.ids, width);
            let (mut p, _) = self.padded_forward(&ids, &valid);
            p.truncate(d.n_tokens());
            ImportanceDistribution { doc_id: d.doc_id.clone(), p }
        }))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            config: serde_json::to_value(&self.config).expect("config serializes"),
            vocab: self.vocab.clone(),
            tensors: self.params.iter().map(|(n, m)| (n.to_string(), m.clone())).collect(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.kind != CHECKPOINT_KIND {
            return Err(Error::MalformedHeader(format!("expected a {CHECKPOINT_KIND} checkpoint, found {:?}", ckpt.kind)));
        }
        let config: DetectorConfig =
            serde_json::from_value(ckpt.config).map_err(|e| Error::MalformedHeader(format!("config: {e}")))?;
        let mut model = Self::init(&ckpt.vocab, &config, 0, None)?;
        if ckpt.tensors.len() != model.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "config implies {} tensors, checkpoint has {}",
                model.params.len(),
                ckpt.tensors.len()
            )));
        }
        for (id, (name, m)) in ckpt.tensors.into_iter().enumerate() {
            let expected = model.params.get(id);
            if name != model.params.name(id) || m.shape() != expected.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {id}: expected {} {:?}, found {name} {:?}",
                    model.params.name(id),
                    expected.shape(),
                    m.shape()
                )));
            }
            if !m.all_finite() {
                return Err(Error::NonFinite(name));
            }
            *model.params.get_mut(id) = m;
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_checkpoint(&self.to_checkpoint(), path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(read_checkpoint(path)?)
    }
}

pub(crate) fn pad(ids: &[usize], width: usize) -> (Vec<usize>, Vec<bool>) {
    let mut p = ids.to_vec();
    p.resize(width, PAD_ID);
    let valid = (0..width).map(|i| i < ids.len()).collect();
    (p, valid)
}

/// Softmax in f64 over valid positions; masked positions get exactly 0.
pub fn masked_softmax<T: Scalar>(logits: &[T], valid: &[bool]) -> Vec<f64> {
    let max = logits.iter().zip(valid).filter(|(_, &ok)| ok).map(|(v, _)| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().zip(valid).map(|(v, &ok)| if ok { (v.as_f64() - max).exp() } else { 0.0 }).collect();
    let s: f64 = p.iter().sum();
    for v in &mut p {
        *v /= s;
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus_io::tokenize;
    use rand::{Rng, SeedableRng};

    fn tiny() -> DetectorConfig {
        DetectorConfig { word_dim: 8, hidden: 16, heads: 2, ffn_dim: 24, mlp_hidden: 16, max_len: 64, char_cnn: None }
    }

    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens(["alpha", "beta", "gamma", "delta", "eps"])
    }

    fn doc(text: &str) -> TokenizedDocument {
        tokenize("d", text, &vocab()).unwrap()
    }

    fn assert_simplex(p: &[f64]) {
        assert!(p.iter().all(|&v| v >= 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn singleton_document_gets_all_mass() {
        let m = GistDetector::init(&vocab(), &tiny(), 3, None).unwrap();
        assert_eq!(m.forward(&doc("gamma")).unwrap().p, vec![1.0]);
    }

    #[test]
    fn duplicated_tokens_without_positions_are_uniform() {
        let m = GistDetector::init(&vocab(), &tiny(), 5, None).unwrap().without_positions();
        let p = m.forward(&doc("beta beta beta beta")).unwrap().p;
        for v in &p {
            assert!((v - 0.25).abs() < 1e-6, "{p:?}");
        }
    }

    #[test]
    fn outputs_are_positive_simplexes_over_seeds() {
        let v = vocab();
        for seed in 0..40u64 {
            let m = GistDetector::init(&v, &tiny(), seed, None).unwrap();
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = r.gen_range(1..20);
            let ids: Vec<usize> = (0..n).map(|_| r.gen_range(1..v.size())).collect();
            let d = TokenizedDocument { doc_id: "r".into(), tokens: vec![String::new(); n], ids };
            let p = m.forward(&d).unwrap().p;
            assert_simplex(&p);
            assert!(p.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn over_length_input_is_rejected() {
        let cfg = DetectorConfig { max_len: 3, ..tiny() };
        let m = GistDetector::init(&vocab(), &cfg, 0, None).unwrap();
        assert!(matches!(m.forward(&doc("alpha beta gamma delta")), Err(Error::InputTooLong { len: 4, max: 3 })));
    }

    #[test]
    fn batching_with_padding_matches_single_runs() {
        let m = GistDetector::init(&vocab(), &tiny(), 11, None).unwrap();
        let a = doc("alpha beta gamma");
        let mut b = doc("delta eps alpha beta gamma delta");
        b.doc_id = "b".into();
        let batch = m.forward_batch(&[a.clone(), b.clone()], Execution::Sequential).unwrap();
        for (d, out) in [a, b].iter().zip(&batch) {
            let single = m.forward(d).unwrap();
            assert_eq!(single.p.len(), out.p.len());
            for (x, y) in single.p.iter().zip(&out.p) {
                assert!((x - y).abs() <= 1e-6);
            }
        }
        let padded = {
            let (ids, valid) = pad(&doc("alpha beta").ids, 5);
            m.padded_forward(&ids, &valid).0
        };
        assert_eq!(&padded[2..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn same_seed_same_params_different_seed_differs() {
        let a = GistDetector::init(&vocab(), &tiny(), 9, None).unwrap();
        let b = GistDetector::init(&vocab(), &tiny(), 9, None).unwrap();
        let c = GistDetector::init(&vocab(), &tiny(), 10, None).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn pretrained_rows_are_copied() {
        let v = vocab();
        let mut t = EmbeddingTable::random(&v, 8, 1);
        t.matrix.row_mut(2).copy_from_slice(&[0.5; 8]);
        let m = GistDetector::init(&v, &tiny(), 0, Some(&t)).unwrap();
        assert_eq!(m.params().get(0).row(2), &[0.5; 8]);
        let wrong = EmbeddingTable::random(&v, 4, 1);
        assert!(matches!(GistDetector::init(&v, &tiny(), 0, Some(&wrong)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn char_branch_runs_and_round_trips() {
        let cfg = DetectorConfig {
            char_cnn: Some(CharCnnConfig { char_dim: 4, filters: 6, width: 3, max_word_len: 8 }),
            ..tiny()
        };
        let m = GistDetector::init(&vocab(), &cfg, 2, None).unwrap();
        let d = doc("alpha zz gamma");
        let p = m.forward(&d).unwrap().p;
        assert_simplex(&p);
        let back = GistDetector::from_checkpoint(m.to_checkpoint()).unwrap();
        assert_eq!(back.forward(&d).unwrap().p, p);
    }

    #[test]
    fn checkpoint_round_trip_reproduces_output_bytes() {
        let m = GistDetector::init(&vocab(), &tiny(), 4, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        let back = GistDetector::load(&path).unwrap();
        assert_eq!(back.params(), m.params());
        let d = doc("alpha beta gamma delta");
        let a: Vec<u64> = m.forward(&d).unwrap().p.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.forward(&d).unwrap().p.iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn config_echo_disagreeing_with_tensors_is_shape_mismatch() {
        let small = DetectorConfig { hidden: 8, mlp_hidden: 8, ..tiny() };
        let mut ckpt = GistDetector::init(&vocab(), &small, 0, None).unwrap().to_checkpoint();
        ckpt.config["hidden"] = serde_json::json!(16);
        assert!(matches!(GistDetector::from_checkpoint(ckpt), Err(Error::ShapeMismatch(_))));
    }
}
