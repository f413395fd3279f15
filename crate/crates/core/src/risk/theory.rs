//! Large-`τ²` limits, the improvement bound on `α`, and the equal-uncertainty
//! risk formulas.

use serde::Serialize;

use super::mc;
use crate::canonical::Design;
use crate::error::{Error, Result};
use crate::numerics::{chi2_cdf, chi2_pdf, chi2_sf, integrate_to_infinity};
use crate::tau::QuadraticFormSpec;

fn need_n_above_3(what: &str, n: usize) -> Result<()> {
    if n <= 3 {
        return Err(Error::InvalidForN { rule: what.to_string(), n });
    }
    Ok(())
}

/// `2/(n − 1)`, the smallest possible supremum of the R-risk.
pub fn minimax_bound(n: usize) -> Result<f64> {
    need_n_above_3("minimax bound", n)?;
    Ok(2.0 / (n as f64 - 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
    /// `2/(n − 1)`
    pub bound: f64,
}

/// Monte Carlo value of `lim_{τ²→∞} R` for weights `w_j ~ α_j / q`:
/// `1 − Σ_j b_j [2α_j E z_j²/D − α_j² E z_j²/D²] / Σ_j b_j`
/// with `D = Σ q_ℓ z_ℓ² + Σ r_i χ²_{ν_i−1}`.
pub fn large_tau_limit(
    design: &Design,
    spec: &QuadraticFormSpec,
    alphas: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<LimitEstimate> {
    need_n_above_3("large-tau limit", design.n())?;
    spec.check_dims(design)?;
    if alphas.len() != design.p() - 1 || alphas.iter().any(|a| !(*a > 0.0)) {
        return Err(Error::InvalidInput(format!(
            "need {} positive alphas, got {:?}",
            design.p() - 1,
            alphas
        )));
    }
    if n_samples == 0 {
        return Err(Error::InvalidInput("n_samples must be >= 1".into()));
    }
    let b = design.b();
    let total_b: f64 = b.iter().sum();
    let nu = design.multiplicities();
    let acc = mc::run(1, n_samples, 1, seed, |_, rng, draws, acc| {
        let mut z2 = vec![0.0; b.len()];
        for _ in 0..draws {
            let mut d = 0.0;
            for (z, q) in z2.iter_mut().zip(&spec.q) {
                let n = rng.normal();
                *z = n * n;
                d += q * *z;
            }
            for (r, &m) in spec.r.iter().zip(nu) {
                if m > 1 {
                    d += r * rng.chi2((m - 1) as u32);
                }
            }
            let s: f64 = (0..b.len())
                .map(|j| b[j] * (2.0 * alphas[j] * z2[j] / d - alphas[j] * alphas[j] * z2[j] / (d * d)))
                .sum();
            acc[0].push(1.0 - s / total_b);
        }
        Ok(())
    })?;
    let a = acc[0][0];
    Ok(LimitEstimate {
        value: a.mean,
        std_error: a.std_error(),
        n_samples,
        bound: 2.0 / (design.n() as f64 - 1.0),
    })
}

/// The limit for `q_j = r_i = 1`, `α_j ≡ α`: `1 − 2α/(n−1) + α²/((n−1)(n−3))`.
pub fn large_tau_limit_equal(n: usize, alpha: f64) -> Result<f64> {
    need_n_above_3("large-tau limit", n)?;
    let n = n as f64;
    Ok(1.0 - 2.0 * alpha / (n - 1.0) + alpha * alpha / ((n - 1.0) * (n - 3.0)))
}

/// Largest `α` for which the Stein-type rule with coefficients `spec` is
/// guaranteed to improve on the sample mean.
pub fn xbar_improvement_alpha(design: &Design, spec: &QuadraticFormSpec) -> Result<f64> {
    let n = design.n();
    need_n_above_3("improvement bound", n)?;
    spec.check_dims(design)?;
    let mut terms: Vec<f64> =
        spec.q.iter().zip(design.t2()).map(|(q, t)| (q * t).powi(2)).collect();
    terms.extend(
        spec.r
            .iter()
            .zip(design.group_variances())
            .zip(design.multiplicities())
            .filter(|(_, &m)| m >= 2)
            .map(|((r, s), _)| (r * s).powi(2)),
    );
    let lo = terms.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = terms.iter().copied().fold(0.0, f64::max);
    let bq: f64 = design.b().iter().zip(&spec.q).map(|(b, q)| b * q).sum();
    let bq2: f64 = design.b().iter().zip(&spec.q).map(|(b, q)| b * q * q).sum();
    Ok(2.0 * (n as f64 - 3.0) * lo * bq / (hi * bq2))
}

/// Weight functions of `v ~ (τ² + s²) χ²_{n+1}` in the equal-uncertainty limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum EqualRule {
    /// `min(α/v, s⁻²)`
    Stein { alpha: f64 },
    /// `{[v − (n−1)s²]₊/c + s²}⁻¹`; `c = n − 1` for DerSimonian–Laird, `n − 3` for modified Hedges
    Plugin { c: f64 },
}

impl EqualRule {
    fn weight(&self, n: usize, s2: f64, v: f64) -> f64 {
        match *self {
            Self::Stein { alpha } => (alpha / v).min(1.0 / s2),
            Self::Plugin { c } => 1.0 / ((v - (n as f64 - 1.0) * s2).max(0.0) / c + s2),
        }
    }

    /// `v` below which the weight sits at `s⁻²`.
    fn kink(&self, n: usize, s2: f64) -> f64 {
        match *self {
            Self::Stein { alpha } => alpha * s2,
            Self::Plugin { .. } => (n as f64 - 1.0) * s2,
        }
    }
}

/// Equal-uncertainty limit of the R-risk for `w(v) = min(α v⁻¹, s⁻²)`.
pub fn equal_uncertainty_risk(n: usize, s2: f64, tau2: f64, alpha: f64) -> Result<f64> {
    need_n_above_3("equal-uncertainty risk", n)?;
    if !(s2 > 0.0) || !(tau2 >= 0.0) || !(alpha > 0.0) {
        return Err(Error::InvalidInput(format!(
            "need s2 > 0, tau2 >= 0, alpha > 0; got {s2}, {tau2}, {alpha}"
        )));
    }
    let k = n as u32;
    let nf = n as f64;
    let xi = alpha * s2 / (tau2 + s2);
    let r2 = tau2 / s2;
    Ok(1.0 - (1.0 - r2 * r2) * chi2_cdf(k + 1, xi) - 2.0 * alpha * chi2_sf(k - 1, xi) / (nf - 1.0)
        + alpha * alpha * chi2_sf(k - 3, xi) / ((nf - 1.0) * (nf - 3.0)))
}

/// Equal-uncertainty limit `∫ (σ w(σx) − 1)² dG_{n+1}(x)`, `σ = τ² + s²`, by quadrature above the kink.
pub fn equal_uncertainty_rule_risk(n: usize, s2: f64, tau2: f64, rule: EqualRule) -> Result<f64> {
    need_n_above_3("equal-uncertainty risk", n)?;
    if let EqualRule::Stein { alpha } = rule {
        return equal_uncertainty_risk(n, s2, tau2, alpha);
    }
    equal_uncertainty_quadrature(n, s2, tau2, rule)
}

/// Quadrature evaluation for any [`EqualRule`].
pub fn equal_uncertainty_quadrature(n: usize, s2: f64, tau2: f64, rule: EqualRule) -> Result<f64> {
    need_n_above_3("equal-uncertainty risk", n)?;
    let sigma = tau2 + s2;
    let k = n as u32 + 1;
    let x0 = rule.kink(n, s2) / sigma;
    let r2 = tau2 / s2;
    let below = r2 * r2 * chi2_cdf(k, x0);
    let above = integrate_to_infinity(
        |x| (sigma * rule.weight(n, s2, sigma * x) - 1.0).powi(2) * chi2_pdf(k, x),
        x0,
        1e-13,
    )?;
    Ok(below + above)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimax_values() {
        assert_eq!(minimax_bound(5).unwrap(), 0.5);
        assert!((minimax_bound(15).unwrap() - 1.0 / 7.0).abs() < 1e-16);
        assert!((minimax_bound(4).unwrap() - 2.0 / 3.0).abs() < 1e-16);
        assert!(minimax_bound(3).is_err());
    }

    #[test]
    fn equal_limit_values() {
        for n in [5usize, 8, 15] {
            let nf = n as f64;
            assert!((large_tau_limit_equal(n, nf - 3.0).unwrap() - 2.0 / (nf - 1.0)).abs() < 1e-14);
            assert!((large_tau_limit_equal(n, nf - 1.0).unwrap() - 2.0 / (nf - 3.0)).abs() < 1e-14);
        }
    }

    #[test]
    fn rar_tail_and_quadrature() {
        let n = 6;
        let alpha = 3.0;
        let far = equal_uncertainty_risk(n, 1.0, 1e12, alpha).unwrap();
        assert!((far - large_tau_limit_equal(n, alpha).unwrap()).abs() < 1e-9);
        for tau2 in [0.0, 0.3, 2.0, 40.0] {
            let a = equal_uncertainty_risk(n, 1.0, tau2, alpha).unwrap();
            let b = equal_uncertainty_quadrature(n, 1.0, tau2, EqualRule::Stein { alpha }).unwrap();
            assert!((a - b).abs() < 1e-9, "tau2 {tau2}: {a} vs {b}");
        }
    }

    #[test]
    fn figure_values() {
        let n = 5;
        let dl = EqualRule::Plugin { c: 4.0 };
        let mh = EqualRule::Plugin { c: 2.0 };
        let at = |rule, t| equal_uncertainty_rule_risk(n, 1.0, t, rule).unwrap();
        assert!((at(dl, 0.0) - 0.1353).abs() < 1e-4);
        assert!((at(mh, 0.0) - 0.2303).abs() < 1e-4);
        assert!((equal_uncertainty_risk(n, 1.0, 0.0, 2.0).unwrap() - 0.3679).abs() < 1e-4);
        assert!((at(dl, 10.0) - 0.7834).abs() < 1e-4);
        assert!((at(mh, 10.0) - 0.6171).abs() < 1e-4);
        assert!((equal_uncertainty_risk(n, 1.0, 10.0, 2.0).unwrap() - 0.4720).abs() < 1e-4);
    }

    #[test]
    fn xbar_bound_equal_variances() {
        // near-equal variances: the min/max ratio tends to one
        let d = Design::new(&[1.0, 1.0 + 1e-7, 1.0 + 2e-7, 1.0 + 3e-7, 1.0 + 4e-7], &[1, 2, 1, 1, 1]).unwrap();
        let spec = QuadraticFormSpec::unit(&d);
        let a = xbar_improvement_alpha(&d, &spec).unwrap();
        assert!((a - 2.0 * 3.0).abs() < 1e-5, "{a}");
    }
}
