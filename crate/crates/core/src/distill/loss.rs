use crate::error::{Error, Result};

fn check_lengths(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch { expected: q.len(), found: p.len() });
    }
    Ok(())
}

/// Distillation objective `-Σ_n q_n ln p_n`. Terms with `q_n = 0`
/// contribute nothing.
pub fn kd_loss(p: &[f64], q: &[f64]) -> Result<f64> {
    check_lengths(p, q)?;
    let loss: f64 = p.iter().zip(q).filter(|(_, &qn)| qn > 0.0).map(|(&pn, &qn)| -qn * pn.ln()).sum();
    if !loss.is_finite() {
        return Err(Error::NonFinite("kd_loss".into()));
    }
    Ok(loss)
}

pub fn entropy(q: &[f64]) -> f64 {
    q.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
}

/// `KL(q ‖ p)`, computed directly rather than as a difference of
/// cross-entropy and entropy.
pub fn kl_divergence(q: &[f64], p: &[f64]) -> Result<f64> {
    check_lengths(p, q)?;
    let kl: f64 = q.iter().zip(p).filter(|(&qn, _)| qn > 0.0).map(|(&qn, &pn)| qn * (qn / pn).ln()).sum();
    if !kl.is_finite() {
        return Err(Error::NonFinite("kl_divergence".into()));
    }
    Ok(kl)
}

pub fn total_variation(p: &[f64], q: &[f64]) -> Result<f64> {
    check_lengths(p, q)?;
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}
