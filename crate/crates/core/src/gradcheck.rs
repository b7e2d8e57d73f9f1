//! Central finite differences, the independent oracle for `Graph::backward`.

use crate::tensor::{MathError, MathResult, Tensor};

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate `i`.
pub fn finite_difference<F>(mut f: F, x: &Tensor, h: f64) -> MathResult<Tensor>
where
    F: FnMut(&Tensor) -> MathResult<f64>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(MathError::InvalidArgument {
            op: "finite_difference",
            reason: format!("step must be positive, got {h}"),
        });
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(MathError::NonFinite { op: "finite_difference" });
        }
        out.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Relative/absolute agreement used throughout the gradient checks:
/// `|a − b| ≤ abs_tol` or `|a − b| ≤ rel_tol · max(|a|, |b|)`.
pub fn grads_close(analytic: &[f64], numeric: &[f64], rel_tol: f64, abs_tol: f64) -> Result<(), String> {
    if analytic.len() != numeric.len() {
        return Err(format!("length {} vs {}", analytic.len(), numeric.len()));
    }
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let diff = (a - n).abs();
        if diff > abs_tol && diff > rel_tol * a.abs().max(n.abs()) {
            return Err(format!("coordinate {i}: analytic {a:.12e} vs numeric {n:.12e}"));
        }
    }
    Ok(())
}
