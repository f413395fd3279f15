use crate::error::{Error, Result};

/// A sign-change bracket for a scalar function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RootBracket {
    pub lo: f64,
    pub hi: f64,
    /// Relative width at which the bracket is considered collapsed.
    pub tol: f64,
}

impl RootBracket {
    pub fn new(lo: f64, hi: f64, tol: f64) -> Self {
        Self { lo, hi, tol }
    }
}

const MAX_ITER: usize = 2_000;

/// Finds a root of `f` inside `bracket` by Illinois regula falsi, falling back
/// to bisection whenever the secant step stalls or an endpoint value is
/// infinite. The returned point always lies in `[lo, hi]`.
pub fn solve_bracketed<F>(mut f: F, bracket: RootBracket) -> Result<f64>
where
    F: FnMut(f64) -> f64,
{
    let RootBracket { mut lo, mut hi, tol } = bracket;
    if !(lo <= hi) || lo.is_nan() || hi.is_nan() {
        return Err(Error::InvalidInput(format!("bad bracket [{lo}, {hi}]")));
    }
    let mut flo = f(lo);
    let mut fhi = f(hi);
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo.is_nan() || fhi.is_nan() || flo.signum() == fhi.signum() {
        return Err(Error::InvalidInput(format!(
            "no sign change on [{lo}, {hi}]: f(lo) = {flo}, f(hi) = {fhi}"
        )));
    }

    // which side was retained on the previous step: -1 lo, +1 hi
    let mut retained = 0i8;
    let mut last_width = hi - lo;
    for iter in 0..MAX_ITER {
        let width = hi - lo;
        if width <= tol * lo.abs().max(hi.abs()) || width <= f64::MIN_POSITIVE {
            break;
        }
        let secant_ok = flo.is_finite() && fhi.is_finite() && iter % 4 != 3;
        let mut x = if secant_ok {
            hi - fhi * (hi - lo) / (fhi - flo)
        } else {
            lo + 0.5 * width
        };
        if !(x > lo && x < hi) {
            x = lo + 0.5 * width;
        }
        if x <= lo || x >= hi {
            // bracket is down to adjacent floats
            break;
        }
        let fx = f(x);
        if fx == 0.0 {
            return Ok(x);
        }
        if fx.is_nan() {
            return Err(Error::NumericalFailure(format!("function is NaN at {x}")));
        }
        if fx.signum() == flo.signum() {
            lo = x;
            flo = fx;
            if retained == 1 && fhi.is_finite() {
                fhi *= 0.5;
            }
            retained = 1;
        } else {
            hi = x;
            fhi = fx;
            if retained == -1 && flo.is_finite() {
                flo *= 0.5;
            }
            retained = -1;
        }
        // force a bisection if two steps did not halve the bracket
        if iter % 2 == 1 {
            if hi - lo > 0.5 * last_width {
                let mid = lo + 0.5 * (hi - lo);
                let fm = f(mid);
                if fm == 0.0 {
                    return Ok(mid);
                }
                if fm.signum() == flo.signum() {
                    lo = mid;
                    flo = fm;
                } else {
                    hi = mid;
                    fhi = fm;
                }
                retained = 0;
            }
            last_width = hi - lo;
        }
        if iter + 1 == MAX_ITER {
            return Err(Error::NumericalFailure(format!(
                "bracketed solve did not collapse [{lo}, {hi}]"
            )));
        }
    }
    // return the endpoint with the smaller residual
    Ok(if flo.abs() <= fhi.abs() { lo } else { hi })
}
