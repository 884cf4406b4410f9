use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function.
///
/// Coordinate `i` is `(f(w + h·eᵢ) − f(w − h·eᵢ)) / 2h`. Used as the
/// reference against which reverse-mode gradients are checked.
pub fn finite_diff_gradient<F>(f: F, w: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let mut probe = w.to_vec();
    let mut grad = Vec::with_capacity(w.len());
    for i in 0..w.len() {
        probe[i] = w[i] + h;
        let plus = f(&probe)?;
        probe[i] = w[i] - h;
        let minus = f(&probe)?;
        probe[i] = w[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteProbe(i));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Largest per-coordinate relative error `|a − b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
