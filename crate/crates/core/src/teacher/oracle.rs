use std::collections::{BTreeSet, HashSet};

use crate::corpus_io::{AttentionTrace, TokenizedDocument};
use crate::error::{Error, Result};
use crate::tensor::Mat;

/// A scripted teacher: `max(1, |salient|)` identical decoding steps, each a
/// softmax with logit `sharpness` on salient positions and 0 elsewhere.
pub fn oracle_teacher_trace(doc: &TokenizedDocument, salient: &BTreeSet<usize>, sharpness: f64) -> Result<AttentionTrace> {
    let n = doc.n_tokens();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if !(sharpness >= 0.0 && sharpness.is_finite()) {
        return Err(Error::InvalidArgument(format!("sharpness must be a finite non-negative number, got {sharpness}")));
    }
    if let Some(&bad) = salient.iter().find(|&&i| i >= n) {
        return Err(Error::IndexOutOfRange { index: bad, len: n });
    }
    let k = salient.len();
    // Stable softmax over two logit levels.
    let (hi, lo) = if k == 0 {
        (0.0, 1.0 / n as f64)
    } else {
        let rest = (n - k) as f64 * (-sharpness).exp();
        (1.0 / (k as f64 + rest), (-sharpness).exp() / (k as f64 + rest))
    };
    let row: Vec<f32> = (0..n).map(|i| if salient.contains(&i) { hi as f32 } else { lo as f32 }).collect();
    let steps = k.max(1);
    let mut data = Vec::with_capacity(steps * n);
    for _ in 0..steps {
        data.extend_from_slice(&row);
    }
    AttentionTrace::new(doc.doc_id.clone(), Mat::from_vec(steps, n, data))
}

/// Positions of the article whose token also occurs in the summary.
pub fn salient_positions(article: &TokenizedDocument, summary_tokens: &[String]) -> BTreeSet<usize> {
    let wanted: HashSet<&str> = summary_tokens.iter().map(String::as_str).collect();
    article.tokens.iter().enumerate().filter(|(_, t)| wanted.contains(t.as_str())).map(|(i, _)| i).collect()
}
