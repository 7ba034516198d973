//! Seeded summarization corpus whose summaries are exactly the "gist" words
//! planted in each article, plus helpers turning it into distillation data
//! with the scripted oracle teacher.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus_io::{split_tokens, tokenize, SummarizationRecord, Vocabulary};
use crate::distill::DistillExample;
use crate::error::{Error, Result};
use crate::rng;
use crate::teacher::{oracle_teacher_trace, salient_positions, soft_target_from_trace};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GistCorpus {
    pub seed: u64,
    pub n_docs: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub fillers: usize,
    pub gist_words: usize,
    pub min_gist: usize,
    pub max_gist: usize,
}

impl Default for GistCorpus {
    fn default() -> Self {
        Self { seed: 0, n_docs: 200, min_len: 20, max_len: 40, fillers: 200, gist_words: 50, min_gist: 2, max_gist: 4 }
    }
}

impl GistCorpus {
    pub fn validate(&self) -> Result<()> {
        let ok = self.min_gist >= 1
            && self.min_gist <= self.max_gist
            && self.max_gist <= self.gist_words
            && self.max_gist <= self.min_len
            && self.min_len <= self.max_len
            && self.fillers >= 1;
        if !ok {
            return Err(Error::InvalidArgument(format!("inconsistent gist corpus {self:?}")));
        }
        Ok(())
    }

    pub fn records(&self) -> Result<Vec<SummarizationRecord>> {
        self.validate()?;
        Ok((0..self.n_docs).map(|i| self.record(format!("doc-{i:04}"))).collect())
    }

    fn record(&self, id: String) -> SummarizationRecord {
        let mut r = rng::stream(self.seed, "gist-corpus", &id);
        let n = r.gen_range(self.min_len..=self.max_len);
        let k = r.gen_range(self.min_gist..=self.max_gist);
        let mut tokens: Vec<String> = (0..n).map(|_| format!("f{}", r.gen_range(0..self.fillers))).collect();
        let words = rand::seq::index::sample(&mut r, self.gist_words, k);
        let mut slots = rand::seq::index::sample(&mut r, n, k).into_vec();
        slots.sort_unstable();
        for (slot, w) in slots.iter().zip(words.iter()) {
            tokens[*slot] = format!("g{w}");
        }
        let summary: Vec<&str> = slots.iter().map(|&s| tokens[s].as_str()).collect();
        SummarizationRecord { summary: summary.join(" "), article: tokens.join(" "), id }
    }
}

/// Vocabulary over articles and summaries, the way the pipeline builds it.
pub fn joint_vocabulary(records: &[SummarizationRecord]) -> Vocabulary {
    Vocabulary::build(records.iter().flat_map(|r| [r.article.as_str(), r.summary.as_str()]), 1)
}

/// Soft targets from the scripted teacher: salient positions are article
/// tokens that occur in the summary.
pub fn oracle_examples(records: &[SummarizationRecord], vocab: &Vocabulary, sharpness: f64) -> Result<Vec<DistillExample>> {
    records
        .iter()
        .map(|rec| {
            let doc = tokenize(rec.id.clone(), &rec.article, vocab)?;
            let salient = salient_positions(&doc, &split_tokens(&rec.summary));
            let trace = oracle_teacher_trace(&doc, &salient, sharpness)?;
            let target = soft_target_from_trace(&trace)?;
            Ok(DistillExample { doc, target })
        })
        .collect()
}
