//! Thin wrappers over double-exponential quadrature.

use crate::error::{Error, Result};

/// Integral of `f` over the finite interval `[a, b]` to absolute accuracy `tol`.
pub fn integrate<F>(f: F, a: f64, b: f64, tol: f64) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    if a == b {
        return Ok(0.0);
    }
    let out = quadrature::integrate(f, a, b, tol);
    if !out.integral.is_finite() {
        return Err(Error::NumericalFailure(format!(
            "quadrature on [{a}, {b}] returned {}",
            out.integral
        )));
    }
    Ok(out.integral)
}

/// Integral of `f` over `[a, ∞)`, via `v = a + x / (1 - x)` on `[0, 1)`.
/// The integrand must decay fast enough for the mapped integral to be finite.
pub fn integrate_to_infinity<F>(f: F, a: f64, tol: f64) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    let mapped = |x: f64| {
        if x >= 1.0 {
            return 0.0;
        }
        let one_minus = 1.0 - x;
        let v = a + x / one_minus;
        let val = f(v) / (one_minus * one_minus);
        if val.is_finite() {
            val
        } else {
            0.0
        }
    };
    integrate(mapped, 0.0, 1.0, tol)
}

/// `ln Σ exp(x_k)` without overflow; `-∞` for an empty or all `-∞` input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
