use crate::error::{Error, Result};
use crate::linalg::Real;

/// Guard added inside the log so a probability that underflowed to zero
/// yields a large finite loss.
pub const LOG_EPS: f64 = 1e-12;

/// Categorical cross-entropy `-ln(p[target] + ε)` for one row of probabilities.
pub fn cross_entropy_loss<T: Real>(probs: &[T], target: usize) -> Result<f64> {
    let p = probs.get(target).ok_or_else(|| {
        Error::arg(format!(
            "target index {target} out of range for {} classes",
            probs.len()
        ))
    })?;
    Ok(-(p.f64() + LOG_EPS).ln())
}

/// Mean cross-entropy over a `[batch × C]` probability matrix.
pub fn mean_cross_entropy<T: Real>(probs: &[T], targets: &[usize], classes: usize) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    let mut total = 0.0;
    for (row, &t) in probs.chunks_exact(classes).zip(targets) {
        total += cross_entropy_loss(row, t)?;
    }
    Ok(total / targets.len() as f64)
}
