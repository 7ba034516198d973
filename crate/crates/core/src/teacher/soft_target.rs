use serde::{Deserialize, Serialize};

use crate::corpus_io::AttentionTrace;
use crate::error::{Error, Result};

/// Per-token target distribution derived from teacher attention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftTarget {
    pub doc_id: String,
    pub q: Vec<f64>,
}

/// How decoding steps are pooled into one distribution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Column-wise arithmetic mean over steps.
    #[default]
    Arithmetic,
    /// Renormalized column-wise geometric mean; any zero in a column zeroes
    /// that position.
    Geometric,
}

/// Mean attention each source position receives over all decoding steps.
pub fn soft_target_from_trace(trace: &AttentionTrace) -> Result<SoftTarget> {
    soft_target_with(trace, Reduction::Arithmetic)
}

pub fn soft_target_with(trace: &AttentionTrace, reduction: Reduction) -> Result<SoftTarget> {
    let t = trace.t_steps();
    if t == 0 {
        return Err(Error::EmptyTrace);
    }
    let n = trace.n_positions();
    let q = match reduction {
        Reduction::Arithmetic => {
            let mut sums = vec![0.0f64; n];
            for r in 0..t {
                for (s, &v) in sums.iter_mut().zip(trace.matrix.row(r)) {
                    *s += v as f64;
                }
            }
            sums.into_iter().map(|s| s / t as f64).collect()
        }
        Reduction::Geometric => {
            let mut logs = vec![0.0f64; n];
            let mut zero = vec![false; n];
            for r in 0..t {
                for (c, &v) in trace.matrix.row(r).iter().enumerate() {
                    if v <= 0.0 {
                        zero[c] = true;
                    } else {
                        logs[c] += (v as f64).ln();
                    }
                }
            }
            let raw: Vec<f64> = logs.iter().zip(&zero).map(|(l, &z)| if z { 0.0 } else { (l / t as f64).exp() }).collect();
            let total: f64 = raw.iter().sum();
            if total <= 0.0 {
                return Err(Error::NonFinite(format!("geometric soft target for {:?}", trace.doc_id)));
            }
            raw.into_iter().map(|v| v / total).collect()
        }
    };
    Ok(SoftTarget { doc_id: trace.doc_id.clone(), q })
}

/// Soft target restricted to the positions where `valid` holds, renormalized
/// over them. Excluded positions carry exactly zero mass.
pub fn soft_target_masked(trace: &AttentionTrace, valid: &[bool], reduction: Reduction) -> Result<SoftTarget> {
    if valid.len() != trace.n_positions() {
        return Err(Error::LengthMismatch { expected: trace.n_positions(), found: valid.len() });
    }
    let mut st = soft_target_with(trace, reduction)?;
    for (q, &ok) in st.q.iter_mut().zip(valid) {
        if !ok {
            *q = 0.0;
        }
    }
    let total: f64 = st.q.iter().sum();
    if total <= 0.0 {
        return Err(Error::NonFinite(format!("no attention mass on real tokens of {:?}", st.doc_id)));
    }
    for q in &mut st.q {
        *q /= total;
    }
    Ok(st)
}

/// Element-wise mean of member targets. Each position's values are summed
/// in sorted order, so the result is exactly invariant to member order.
pub fn combine_ensemble(targets: &[SoftTarget]) -> Result<SoftTarget> {
    let first = targets.first().ok_or(Error::EmptyEnsemble)?;
    let n = first.q.len();
    for t in &targets[1..] {
        if t.q.len() != n {
            return Err(Error::LengthMismatch { expected: n, found: t.q.len() });
        }
        if t.doc_id != first.doc_id {
            return Err(Error::InvalidArgument(format!(
                "ensemble members disagree on document: {:?} vs {:?}",
                first.doc_id, t.doc_id
            )));
        }
    }
    let k = targets.len() as f64;
    let mut column = Vec::with_capacity(targets.len());
    let q = (0..n)
        .map(|i| {
            column.clear();
            column.extend(targets.iter().map(|t| t.q[i]));
            column.sort_by(f64::total_cmp);
            column.iter().sum::<f64>() / k
        })
        .collect();
    Ok(SoftTarget { doc_id: first.doc_id.clone(), q })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mat;
    use proptest::prelude::*;

    fn trace(rows: usize, cols: usize, data: Vec<f32>) -> AttentionTrace {
        AttentionTrace::new("d", Mat::from_vec(rows, cols, data)).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn uniform_trace_gives_uniform_target() {
        let t = trace(4, 3, vec![1.0 / 3.0; 12]);
        close(&soft_target_from_trace(&t).unwrap().q, &[1.0 / 3.0; 3], 1e-7);
    }

    #[test]
    fn two_step_trace_column_mean() {
        // (0.5 + 0.1) / 2 = 0.3, (0.5 + 0.9) / 2 = 0.7
        let t = trace(2, 2, vec![0.5, 0.5, 0.1, 0.9]);
        close(&soft_target_from_trace(&t).unwrap().q, &[0.3, 0.7], 1e-7);
    }

    #[test]
    fn single_step_is_identity() {
        let t = trace(1, 3, vec![0.0, 1.0, 0.0]);
        assert_eq!(soft_target_from_trace(&t).unwrap().q, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn empty_trace_is_an_error() {
        let t = AttentionTrace { doc_id: "e".into(), matrix: Mat::zeros(0, 3) };
        assert!(matches!(soft_target_from_trace(&t), Err(Error::EmptyTrace)));
    }

    #[test]
    fn geometric_variant_zeroes_any_zero_column() {
        let t = trace(2, 3, vec![0.5, 0.5, 0.0, 0.25, 0.25, 0.5]);
        let q = soft_target_with(&t, Reduction::Geometric).unwrap().q;
        close(&q, &[0.5, 0.5, 0.0], 1e-12);
    }

    #[test]
    fn masked_target_renormalizes_over_real_tokens() {
        let t = trace(1, 4, vec![0.25, 0.25, 0.25, 0.25]);
        let q = soft_target_masked(&t, &[true, true, false, true], Reduction::Arithmetic).unwrap().q;
        close(&q, &[1.0 / 3.0, 1.0 / 3.0, 0.0, 1.0 / 3.0], 1e-7);
    }

    fn st(q: &[f64]) -> SoftTarget {
        SoftTarget { doc_id: "d".into(), q: q.to_vec() }
    }

    #[test]
    fn ensemble_examples() {
        close(&combine_ensemble(&[st(&[1.0, 0.0]), st(&[0.0, 1.0])]).unwrap().q, &[0.5, 0.5], 0.0);
        assert_eq!(combine_ensemble(&[st(&[0.2, 0.8])]).unwrap().q, vec![0.2, 0.8]);
        close(&combine_ensemble(&[st(&[0.2, 0.8]), st(&[0.4, 0.6])]).unwrap().q, &[0.3, 0.7], 1e-15);
    }

    #[test]
    fn ensemble_errors() {
        assert!(matches!(combine_ensemble(&[]), Err(Error::EmptyEnsemble)));
        assert!(matches!(combine_ensemble(&[st(&[1.0]), st(&[0.5, 0.5])]), Err(Error::LengthMismatch { .. })));
        let mut other = st(&[1.0]);
        other.doc_id = "x".into();
        assert!(matches!(combine_ensemble(&[st(&[1.0]), other]), Err(Error::InvalidArgument(_))));
    }

    fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..1.0, n).prop_map(|v| {
            let s: f64 = v.iter().sum::<f64>() + 1e-12;
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn ensemble_is_permutation_invariant(members in proptest::collection::vec(simplex(6), 1..6), rot in 0usize..6) {
            let targets: Vec<SoftTarget> = members.iter().map(|q| st(q)).collect();
            let mut rotated = targets.clone();
            rotated.rotate_left(rot % targets.len());
            rotated.reverse();
            let a = combine_ensemble(&targets).unwrap();
            let b = combine_ensemble(&rotated).unwrap();
            prop_assert_eq!(a.q.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.q.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert!((a.q.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
