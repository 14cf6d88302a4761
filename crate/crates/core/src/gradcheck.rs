//! Central finite differences for verifying tape gradients.

use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` at `x` with half-step `h`.
pub fn finite_diff_grad(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let original = probe[i];
        probe[i] = original + h;
        let plus = f(&probe)?;
        probe[i] = original - h;
        let minus = f(&probe)?;
        probe[i] = original;
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Worst disagreement between two gradients, relative to the larger of the
/// compared magnitudes and 1. Behaves like absolute error near zero.
pub fn max_relative_error(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len(), "gradient length mismatch");
    got.iter()
        .zip(want)
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(1.0))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_slope() {
        let mut f = |x: &[f64]| Ok(x[0] * x[0]);
        let g = finite_diff_grad(&mut f, &[3.0], DEFAULT_STEP).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn sine_slope_at_origin() {
        let mut f = |x: &[f64]| Ok(x[0].sin());
        let g = finite_diff_grad(&mut f, &[0.0], DEFAULT_STEP).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn multivariate_gradient() {
        let mut f = |x: &[f64]| Ok(x[0] * x[1] + x[1].exp());
        let g = finite_diff_grad(&mut f, &[2.0, 0.5], DEFAULT_STEP).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-8);
        assert!((g[1] - (2.0 + 0.5f64.exp())).abs() < 1e-8);
    }
}
