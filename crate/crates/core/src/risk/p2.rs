//! Exact risk at `τ² = 0` for two distinct variances.
//!
//! With one contrast, `R(δ, 0)` reduces to a one-dimensional expectation over
//! a positive combination of independent chi-square variables. That law is
//! handled exactly with Ruben's mixture: `Σ λ_i χ²_{k_i}` is a mixture of
//! `β χ²_{K+2m}` with `β = min λ_i`, `K = Σ k_i`.

use serde::Serialize;

use crate::canonical::Design;
use crate::error::{Error, Result};
use crate::numerics::{chi2_cdf, chi2_pdf, chi2_sf, integrate_to_infinity, solve_bracketed, RootBracket};

const MIXTURE_TOL: f64 = 1e-14;
const MIXTURE_MAX_TERMS: usize = 20_000;

fn need_p2(design: &Design) -> Result<()> {
    if design.p() != 2 {
        return Err(Error::Unsupported(format!("two-variance analytics need p = 2, got p = {}", design.p())));
    }
    Ok(())
}

fn need_n_above_3(design: &Design) -> Result<()> {
    if design.n() <= 3 {
        return Err(Error::InvalidForN { rule: "two-variance risk".into(), n: design.n() });
    }
    Ok(())
}

/// Mixture weights `c_m` and scale `β` for `Σ λ_i χ²_{k_i}` (terms with `k_i = 0` ignored).
#[derive(Debug, Clone, PartialEq)]
pub struct ChiSquareMixture {
    pub beta: f64,
    pub base_df: u32,
    pub weights: Vec<f64>,
}

impl ChiSquareMixture {
    pub fn new(terms: &[(f64, u32)]) -> Result<Self> {
        let terms: Vec<(f64, u32)> = terms.iter().copied().filter(|t| t.1 > 0).collect();
        if terms.is_empty() || terms.iter().any(|t| !(t.0 > 0.0)) {
            return Err(Error::InvalidInput("chi-square combination needs positive coefficients".into()));
        }
        let beta = terms.iter().map(|t| t.0).fold(f64::INFINITY, f64::min);
        let base_df: u32 = terms.iter().map(|t| t.1).sum();
        let c0: f64 = terms.iter().map(|&(l, k)| (beta / l).powf(0.5 * k as f64)).product();
        let mut weights = vec![c0];
        let mut g = vec![0.0];
        let mut mass = c0;
        while 1.0 - mass > MIXTURE_TOL {
            let m = weights.len();
            if m >= MIXTURE_MAX_TERMS {
                return Err(Error::NumericalFailure(format!(
                    "chi-square mixture did not converge in {m} terms (missing mass {})",
                    1.0 - mass
                )));
            }
            g.push(0.5 * terms.iter().map(|&(l, k)| k as f64 * (1.0 - beta / l).powi(m as i32)).sum::<f64>());
            let c: f64 = (0..m).map(|r| g[m - r] * weights[r]).sum::<f64>() / m as f64;
            weights.push(c);
            mass += c;
        }
        Ok(Self { beta, base_df, weights })
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.weights
            .iter()
            .enumerate()
            .map(|(m, c)| c * chi2_cdf(self.base_df + 2 * m as u32, x / self.beta))
            .sum()
    }

    /// `E[(c/X − 1)²; X > c]`.
    pub fn shrinkage_loss(&self, c: f64) -> f64 {
        let xi = c / self.beta;
        self.weights
            .iter()
            .enumerate()
            .map(|(m, w)| w * chi2_shrinkage_loss(self.base_df + 2 * m as u32, xi))
            .sum()
    }
}

/// `E[(ξ/X − 1)²; X > ξ]` for `X ~ χ²_k`, `k > 4`.
pub fn chi2_shrinkage_loss(k: u32, xi: f64) -> f64 {
    let kf = k as f64;
    chi2_sf(k, xi) - 2.0 * xi * chi2_sf(k - 2, xi) / (kf - 2.0)
        + xi * xi * chi2_sf(k - 4, xi) / ((kf - 2.0) * (kf - 4.0))
}

/// `κ = 1 + t² Σ (ν_i − 1)/s_i²`.
pub fn kappa(design: &Design) -> Result<f64> {
    need_p2(design)?;
    let t2 = design.t2()[0];
    Ok(1.0
        + t2 * design
            .group_variances()
            .iter()
            .zip(design.multiplicities())
            .map(|(s, &m)| (m as f64 - 1.0) / s)
            .sum::<f64>())
}

/// The condition `κ < n − 1` written in terms of `r = s₁²/s₂²`.
pub fn kappa_condition(nu1: usize, nu2: usize, ratio: f64) -> bool {
    let (a, b) = (nu1 as f64, nu2 as f64);
    let n = a + b;
    (b - 1.0) * ratio / a + (a - 1.0) / (b * ratio) < n * (n - 1.0) / (a * b) - 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum P2Rule {
    Delta1,
    Delta0,
    DerSimonianLaird,
}

/// Coefficients of `F/t²`: `χ²₃ + Σ (s_i²/t²) χ²_{ν_i−1}`.
fn delta1_mixture(design: &Design) -> Result<ChiSquareMixture> {
    let t2 = design.t2()[0];
    let mut terms = vec![(1.0, 3u32)];
    for (s, &m) in design.group_variances().iter().zip(design.multiplicities()) {
        terms.push((s / t2, (m - 1) as u32));
    }
    ChiSquareMixture::new(&terms)
}

/// `R(δ, 0)` for the two-variance design.
pub fn p2_risk_at_zero(design: &Design, rule: P2Rule) -> Result<f64> {
    need_p2(design)?;
    need_n_above_3(design)?;
    let n = design.n();
    let nf = n as f64;
    match rule {
        P2Rule::Delta1 => Ok(delta1_mixture(design)?.shrinkage_loss(nf - 3.0)),
        P2Rule::Delta0 => Ok(chi2_shrinkage_loss(n as u32 + 1, nf - 1.0)),
        P2Rule::DerSimonianLaird => {
            let kappa = kappa(design)?;
            integrate_to_infinity(
                |v| (1.0 / (1.0 + (v - nf + 1.0) / kappa) - 1.0).powi(2) * chi2_pdf(n as u32 + 1, v),
                nf - 1.0,
                1e-14,
            )
        }
    }
}

/// Okamoto constant `a = t² / [t⁶ Π s_i^{2(ν_i−1)}]^{1/(n+1)}`, in logs.
pub fn okamoto_constant(design: &Design) -> Result<f64> {
    need_p2(design)?;
    let t2 = design.t2()[0];
    let n = design.n() as f64;
    let log_geo = (3.0 * t2.ln()
        + design
            .group_variances()
            .iter()
            .zip(design.multiplicities())
            .map(|(s, &m)| (m as f64 - 1.0) * s.ln())
            .sum::<f64>())
        / (n + 1.0);
    Ok((t2.ln() - log_geo).exp())
}

/// `(G_{n+1}(a v), a)`: an upper bound for `F(t² v)`.
pub fn okamoto_bound(design: &Design, v: f64) -> Result<(f64, f64)> {
    let a = okamoto_constant(design)?;
    Ok((chi2_cdf(design.n() as u32 + 1, a * v), a))
}

/// Exact `F(t² v)` by the chi-square mixture.
pub fn delta1_scaled_cdf(design: &Design, v: f64) -> Result<f64> {
    need_p2(design)?;
    Ok(delta1_mixture(design)?.cdf(v))
}

/// Lower bound on `R(δ₁, 0)` as a function of the Okamoto constant.
pub fn delta1_lower_bound(n: usize, a: f64) -> Result<f64> {
    if n <= 3 {
        return Err(Error::InvalidForN { rule: "delta1 lower bound".into(), n });
    }
    let k = n as u32;
    let c = n as f64 - 3.0;
    let x = a * c;
    Ok(chi2_sf(k + 1, x) - 2.0 * c * a * chi2_sf(k - 1, x) / (n as f64 - 1.0)
        + c * a * a * chi2_sf(k - 3, x) / (n as f64 - 1.0))
}

/// `a₀(n)`: the `a` at which the lower bound equals `2/(n − 1)`.
pub fn a0(n: usize) -> Result<f64> {
    if n <= 3 {
        return Err(Error::InvalidForN { rule: "delta1 lower bound".into(), n });
    }
    let target = 2.0 / (n as f64 - 1.0);
    solve_bracketed(|a| delta1_lower_bound(n, a).unwrap() - target, RootBracket::new(1e-3, 1.0, 1e-14))
}

/// For multiplicities `(ν₁, ν₂)`, the ratio `s₁²/s₂² < 1` at which `R(δ₁, 0) = 2/(n − 1)`,
/// together with the Okamoto constant there.
pub fn delta1_minimax_ratio(nu1: usize, nu2: usize) -> Result<(f64, f64)> {
    let n = nu1 + nu2;
    if n <= 3 {
        return Err(Error::InvalidForN { rule: "delta1".into(), n });
    }
    let target = 2.0 / (n as f64 - 1.0);
    let risk = |r: f64| -> Result<f64> {
        let d = Design::new(&[r, 1.0], &[nu1, nu2])?;
        p2_risk_at_zero(&d, P2Rule::Delta1)
    };
    let mut err = None;
    let ratio = solve_bracketed(
        |r| match risk(r) {
            Ok(v) => v - target,
            Err(e) => {
                err.get_or_insert(e);
                f64::NAN
            }
        },
        RootBracket::new(1e-3, 0.999, 1e-13),
    );
    if let Some(e) = err {
        return Err(e);
    }
    let ratio = ratio?;
    let a = okamoto_constant(&Design::new(&[ratio, 1.0], &[nu1, nu2])?)?;
    Ok((ratio, a))
}
