//! Blending a model's context vector or per-token scores with an importance
//! distribution.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Mat, Scalar};

/// Which coefficient weights `p` in score fusion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreCoefficient {
    Lambda,
    #[default]
    LambdaPrime,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSpec {
    pub lambda_repr: f64,
    pub lambda_score: f64,
    /// `LambdaPrime` gives `(1 - λ') r + λ' p`; `Lambda` gives
    /// `(1 - λ') r + λ p`.
    pub score_coef: ScoreCoefficient,
}

impl Default for FusionSpec {
    fn default() -> Self {
        Self { lambda_repr: 0.5, lambda_score: 0.2, score_coef: ScoreCoefficient::LambdaPrime }
    }
}

impl FusionSpec {
    pub fn new(lambda_repr: f64, lambda_score: f64) -> Result<Self> {
        let s = Self { lambda_repr, lambda_score, ..Default::default() };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_repr", self.lambda_repr), ("lambda_score", self.lambda_score)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::OutOfRange(name.into()));
            }
        }
        Ok(())
    }

    /// No fusion at either level.
    pub fn off() -> Self {
        Self { lambda_repr: 0.0, lambda_score: 0.0, ..Default::default() }
    }

    fn score_weight(&self) -> f64 {
        match self.score_coef {
            ScoreCoefficient::LambdaPrime => self.lambda_score,
            ScoreCoefficient::Lambda => self.lambda_repr,
        }
    }
}

/// Per-token states and their column sum.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextBundle {
    states: Mat<f64>,
    context: Vec<f64>,
}

impl ContextBundle {
    pub fn new(states: Mat<f64>) -> Result<Self> {
        if states.cols == 0 || states.rows == 0 {
            return Err(Error::EmptyInput);
        }
        if !states.all_finite() {
            return Err(Error::NonFinite("context states".into()));
        }
        let mut context = vec![0.0; states.cols];
        for r in 0..states.rows {
            for (c, v) in context.iter_mut().zip(states.row(r)) {
                *c += v;
            }
        }
        Ok(Self { states, context })
    }

    /// Builds from states and a caller-supplied context. The context is
    /// always recomputed as the column sum; a disagreement beyond 1e-5 is
    /// logged.
    pub fn with_context(states: Mat<f64>, context: &[f64]) -> Result<Self> {
        let b = Self::new(states)?;
        if context.len() != b.context.len() {
            return Err(Error::LengthMismatch { expected: b.context.len(), found: context.len() });
        }
        let gap = b.context.iter().zip(context).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max);
        if gap > 1e-5 {
            tracing::warn!(gap, "supplied context differs from the sum of states; using the sum");
        }
        Ok(b)
    }

    pub fn states(&self) -> &Mat<f64> {
        &self.states
    }

    pub fn context(&self) -> &[f64] {
        &self.context
    }

    pub fn n_positions(&self) -> usize {
        self.states.rows
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
}

impl ScoreVector {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("scores".into()));
        }
        Ok(Self { scores })
    }
}

fn check_simplex(p: &[f64]) -> Result<()> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidArgument("importance weights must be finite and non-negative".into()));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("importance weights sum to {s}")));
    }
    Ok(())
}

/// `(1 - λ) c + λ Σ_t p_t s_t`.
pub fn fuse_representation(bundle: &ContextBundle, p: &[f64], spec: &FusionSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    if p.len() != bundle.n_positions() {
        return Err(Error::LengthMismatch { expected: bundle.n_positions(), found: p.len() });
    }
    check_simplex(p)?;
    let lambda = spec.lambda_repr;
    let mut pooled = vec![0.0; bundle.context.len()];
    for (t, &w) in p.iter().enumerate() {
        for (o, s) in pooled.iter_mut().zip(bundle.states.row(t)) {
            *o += w * s;
        }
    }
    Ok(bundle.context.iter().zip(&pooled).map(|(c, g)| (1.0 - lambda) * c + lambda * g).collect())
}

/// `(1 - λ') r_t + λ' p_t` element-wise, with no rescaling of `r`.
pub fn fuse_scores(r: &ScoreVector, p: &[f64], spec: &FusionSpec) -> Result<ScoreVector> {
    spec.validate()?;
    if p.len() != r.scores.len() {
        return Err(Error::LengthMismatch { expected: r.scores.len(), found: p.len() });
    }
    check_simplex(p)?;
    let keep = 1.0 - spec.lambda_score;
    let w = spec.score_weight();
    Ok(ScoreVector { scores: r.scores.iter().zip(p).map(|(r, p)| keep * r + w * p).collect() })
}

/// Differentiable representation fusion over an `N × d` state matrix,
/// returning a `1 × d` row. At `lambda == 0` the value and gradients equal
/// those of a plain column sum.
pub fn fuse_representation_graph<T: Scalar>(g: &mut Graph<T>, states: Var, p: &[f64], lambda: f64) -> Var {
    let c = g.sum_rows(states);
    let weights = g.input(Mat::row_vector(p.iter().map(|&v| T::of(v)).collect()));
    let pooled = g.matmul(weights, states);
    let c = g.scale(c, T::of(1.0 - lambda));
    let pooled = g.scale(pooled, T::of(lambda));
    g.add(c, pooled)
}
