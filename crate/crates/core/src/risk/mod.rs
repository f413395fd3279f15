//! R-risk: the excess squared error over the oracle weighted mean `x̃`,
//! normalized by `Var(x̄) − Var(x̃)` so that the sample mean has risk one.

mod mc;
pub mod p2;
pub mod theory;

use std::io::Write;

use serde::Serialize;

use crate::canonical::{contrasts, Design, Sufficient};
use crate::error::{Error, Result};
use crate::mu::{PreparedRule, WeightRule};
use crate::numerics::RngStream;

pub use mc::{draw_grouped, draw_sufficient, Welford, CHUNK};
pub use theory::{
    equal_uncertainty_risk, equal_uncertainty_rule_risk, minimax_bound, large_tau_limit,
    large_tau_limit_equal, xbar_improvement_alpha, EqualRule, LimitEstimate,
};

pub const DEFAULT_SAMPLES: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RiskMethod {
    MonteCarlo,
    ClosedForm,
    Asymptotic,
}

impl RiskMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::MonteCarlo => "monte-carlo",
            Self::ClosedForm => "closed-form",
            Self::Asymptotic => "asymptotic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskPoint {
    pub tau2: f64,
    pub r_risk: f64,
    pub mc_std_error: f64,
    pub n_samples: usize,
    pub method: RiskMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskCurve {
    pub rule: String,
    pub group_variances: Vec<f64>,
    pub multiplicities: Vec<usize>,
    pub points: Vec<RiskPoint>,
    pub seed: u64,
}

impl RiskCurve {
    /// Writes `tau2,r_risk,mc_se,method,minimax_bound`; the bound column is empty for `n ≤ 3`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let n: usize = self.multiplicities.iter().sum();
        let bound = if n > 3 { minimax_bound(n)?.to_string() } else { String::new() };
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::InvalidInput(format!("csv write failed: {e}"));
        w.write_record(["tau2", "r_risk", "mc_se", "method", "minimax_bound"]).map_err(csv_err)?;
        for p in &self.points {
            w.write_record([
                p.tau2.to_string(),
                p.r_risk.to_string(),
                p.mc_std_error.to_string(),
                p.method.as_str().to_string(),
                bound.clone(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `Σ_j (w_j − h_j)² b_j y_j² / Σ_j b_j h_j` with `h_j = 1/(τ² + t_j²)`.
pub fn loss(design: &Design, tau2: f64, y: &[f64], w: &[f64]) -> f64 {
    let mut num = 0.0;
    for (((wj, yj), b), t) in w.iter().zip(y).zip(design.b()).zip(design.t2()) {
        let h = 1.0 / (tau2 + t);
        num += (wj - h).powi(2) * b * yj * yj;
    }
    num / design.variance_gap(tau2)
}

/// `(δ − x̃)² / (Var(x̄) − Var(x̃))` from group means.
pub fn direct_loss(design: &Design, tau2: f64, group_means: &[f64], w: &[f64]) -> f64 {
    let n = design.n() as f64;
    let y = contrasts(design, group_means);
    let xbar: f64 = design.multiplicities().iter().zip(group_means).map(|(&m, x)| m as f64 * x).sum::<f64>() / n;
    let delta = xbar - crate::mu::shrinkage_term(design, &y, w);
    let prec: Vec<f64> = design
        .multiplicities()
        .iter()
        .zip(design.group_variances())
        .map(|(&m, s)| m as f64 / (tau2 + s))
        .collect();
    let total: f64 = prec.iter().sum();
    let xt = prec.iter().zip(group_means).map(|(p, x)| p * x).sum::<f64>() / total;
    let gap = (tau2 + design.mean_variance()) / n - 1.0 / total;
    (delta - xt).powi(2) / gap
}

/// [`direct_loss`] averaged over all sign patterns of `y`, holding the weights
/// fixed. Cross terms between contrasts are odd and cancel, which leaves
/// exactly the diagonal [`loss`].
pub fn symmetrized_direct_loss(design: &Design, tau2: f64, y: &[f64], w: &[f64]) -> f64 {
    let m = y.len();
    let mut total = 0.0;
    let mut flipped = vec![0.0; m];
    for mask in 0u64..(1u64 << m) {
        for j in 0..m {
            flipped[j] = if mask >> j & 1 == 1 { -y[j] } else { y[j] };
        }
        let term: f64 = design
            .b()
            .iter()
            .zip(design.t2())
            .zip(&flipped)
            .zip(w)
            .map(|(((b, t), yj), wj)| b.sqrt() * (1.0 / (tau2 + t) - wj) * yj)
            .sum();
        total += term * term;
    }
    total / (1u64 << m) as f64 / design.variance_gap(tau2)
}

/// Exact R-risk of the fixed weights `w_j = (τ₀² + t_j²)⁻¹`.
pub fn fixed_plugin_risk(design: &Design, tau2: f64, tau0: f64) -> f64 {
    let num: f64 = design
        .b()
        .iter()
        .zip(design.t2())
        .map(|(b, t)| (1.0 / (tau0 + t) - 1.0 / (tau2 + t)).powi(2) * b * (tau2 + t))
        .sum();
    num / design.variance_gap(tau2)
}

/// Exact R-risk for rules with data-independent weights, if `rule` is one.
pub fn closed_form_risk(design: &Design, tau2: f64, rule: &WeightRule) -> Option<f64> {
    match rule {
        WeightRule::SampleMean => Some(1.0),
        WeightRule::GraybillDeal => Some(fixed_plugin_risk(design, tau2, 0.0)),
        WeightRule::Fixed(t) => Some(fixed_plugin_risk(design, tau2, *t)),
        _ => None,
    }
}

fn check_inputs(tau2s: &[f64], n_samples: usize) -> Result<()> {
    if n_samples == 0 {
        return Err(Error::InvalidInput("n_samples must be >= 1".into()));
    }
    if let Some(t) = tau2s.iter().find(|t| !(**t >= 0.0) || !t.is_finite()) {
        return Err(Error::InvalidInput(format!("tau2 must be finite and >= 0, got {t}")));
    }
    Ok(())
}

/// Monte Carlo R-risk at each `τ²`, one independent stream family per point.
pub fn r_risk_mc_many(
    design: &Design,
    tau2s: &[f64],
    rule: &PreparedRule,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<RiskPoint>> {
    check_inputs(tau2s, n_samples)?;
    let (m, p) = (design.p() - 1, design.p());
    let acc = mc::run(tau2s.len(), n_samples, 1, seed, |point, rng, draws, acc| {
        let tau2 = tau2s[point];
        let (mut y, mut u2, mut w) = (vec![0.0; m], vec![0.0; p], Vec::with_capacity(m));
        for _ in 0..draws {
            draw_sufficient(design, tau2, rng, &mut y, &mut u2);
            rule.weights_into(Sufficient::new(design, &y, &u2), &mut w)?;
            acc[0].push(loss(design, tau2, &y, &w));
        }
        Ok(())
    })?;
    Ok(tau2s
        .iter()
        .zip(acc)
        .map(|(&tau2, a)| RiskPoint {
            tau2,
            r_risk: a[0].mean,
            mc_std_error: a[0].std_error(),
            n_samples,
            method: RiskMethod::MonteCarlo,
        })
        .collect())
}

pub fn r_risk_mc(design: &Design, tau2: f64, rule: &WeightRule, n_samples: usize, seed: u64) -> Result<RiskPoint> {
    let prepared = rule.prepare(design)?;
    Ok(r_risk_mc_many(design, &[tau2], &prepared, n_samples, seed)?.remove(0))
}

/// Default grid: 0 plus 40 log-spaced points on `[10⁻³ s², 10³ s²]`.
pub fn default_grid(design: &Design) -> Vec<f64> {
    log_grid(design.mean_variance(), 1e-3, 1e3, 40)
}

/// 0 plus `count` log-spaced multiples of `scale` between `lo` and `hi`.
pub fn log_grid(scale: f64, lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let mut g = vec![0.0];
    let (a, b) = (lo.ln(), hi.ln());
    g.extend((0..count).map(|k| {
        let f = if count > 1 { k as f64 / (count - 1) as f64 } else { 0.0 };
        scale * (a + (b - a) * f).exp()
    }));
    g
}

/// R-risk over a grid; exact where the rule has constant weights, Monte Carlo otherwise.
pub fn risk_curve(
    design: &Design,
    rule: &WeightRule,
    tau2_grid: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<RiskCurve> {
    check_inputs(tau2_grid, n_samples)?;
    let mut grid = tau2_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let prepared = rule.prepare(design)?;
    let points = if closed_form_risk(design, 0.0, rule).is_some() {
        grid.iter()
            .map(|&tau2| RiskPoint {
                tau2,
                r_risk: closed_form_risk(design, tau2, rule).unwrap(),
                mc_std_error: 0.0,
                n_samples: 0,
                method: RiskMethod::ClosedForm,
            })
            .collect()
    } else {
        r_risk_mc_many(design, &grid, &prepared, n_samples, seed)?
    };
    Ok(RiskCurve {
        rule: prepared.name().to_string(),
        group_variances: design.group_variances().to_vec(),
        multiplicities: design.multiplicities().to_vec(),
        points,
        seed,
    })
}

/// Risks of two rules on common draws, with the standard error of their difference.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairedRisk {
    pub tau2: f64,
    pub risk_a: f64,
    pub se_a: f64,
    pub risk_b: f64,
    pub se_b: f64,
    /// `risk_a − risk_b`
    pub difference: f64,
    pub difference_se: f64,
}

pub fn paired_risk_mc(
    design: &Design,
    tau2: f64,
    a: &PreparedRule,
    b: &PreparedRule,
    n_samples: usize,
    seed: u64,
) -> Result<PairedRisk> {
    check_inputs(&[tau2], n_samples)?;
    let (m, p) = (design.p() - 1, design.p());
    let acc = mc::run(1, n_samples, 3, seed, |_, rng, draws, acc| {
        let (mut y, mut u2) = (vec![0.0; m], vec![0.0; p]);
        let (mut wa, mut wb) = (Vec::with_capacity(m), Vec::with_capacity(m));
        for _ in 0..draws {
            draw_sufficient(design, tau2, rng, &mut y, &mut u2);
            let s = Sufficient::new(design, &y, &u2);
            a.weights_into(s, &mut wa)?;
            b.weights_into(s, &mut wb)?;
            let (la, lb) = (loss(design, tau2, &y, &wa), loss(design, tau2, &y, &wb));
            acc[0].push(la);
            acc[1].push(lb);
            acc[2].push(la - lb);
        }
        Ok(())
    })?;
    let acc = &acc[0];
    Ok(PairedRisk {
        tau2,
        risk_a: acc[0].mean,
        se_a: acc[0].std_error(),
        risk_b: acc[1].mean,
        se_b: acc[1].std_error(),
        difference: acc[2].mean,
        difference_se: acc[2].std_error(),
    })
}

/// Monte Carlo check of `Var(δ) = Var(x̃) + E(δ − x̃)²` from simulated group means.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecompositionCheck {
    /// MC `E δ²` (μ = 0)
    pub var_delta: f64,
    pub var_delta_se: f64,
    /// exact `[Σ ν_i/(τ² + s_i²)]⁻¹`
    pub var_tilde: f64,
    /// MC `E(δ − x̃)²`
    pub mse_tilde: f64,
    pub mse_tilde_se: f64,
    /// MC mean of `δ² − (δ − x̃)² − Var(x̃)`
    pub difference: f64,
    pub difference_se: f64,
}

pub fn variance_decomposition_check(
    design: &Design,
    tau2: f64,
    rule: &WeightRule,
    n_samples: usize,
    seed: u64,
) -> Result<DecompositionCheck> {
    check_inputs(&[tau2], n_samples)?;
    let prepared = rule.prepare(design)?;
    let n = design.n() as f64;
    let p = design.p();
    let prec: Vec<f64> = design
        .multiplicities()
        .iter()
        .zip(design.group_variances())
        .map(|(&m, s)| m as f64 / (tau2 + s))
        .collect();
    let total: f64 = prec.iter().sum();
    let var_tilde = 1.0 / total;
    let acc = mc::run(1, n_samples, 3, seed, |_, rng, draws, acc| {
        let (mut x, mut u2, mut w) = (vec![0.0; p], vec![0.0; p], Vec::new());
        for _ in 0..draws {
            draw_grouped(design, tau2, rng, &mut x, &mut u2);
            let y = contrasts(design, &x);
            prepared.weights_into(Sufficient::new(design, &y, &u2), &mut w)?;
            let xbar: f64 = design.multiplicities().iter().zip(&x).map(|(&m, x)| m as f64 * x).sum::<f64>() / n;
            let delta = xbar - crate::mu::shrinkage_term(design, &y, &w);
            let xt: f64 = prec.iter().zip(&x).map(|(p, x)| p * x).sum::<f64>() / total;
            let e2 = (delta - xt).powi(2);
            acc[0].push(delta * delta);
            acc[1].push(e2);
            acc[2].push(delta * delta - e2 - var_tilde);
        }
        Ok(())
    })?;
    let acc = &acc[0];
    Ok(DecompositionCheck {
        var_delta: acc[0].mean,
        var_delta_se: acc[0].std_error(),
        var_tilde,
        mse_tilde: acc[1].mean,
        mse_tilde_se: acc[1].std_error(),
        difference: acc[2].mean,
        difference_se: acc[2].std_error(),
    })
}

/// `Σ_j b_j (f_j² − 2 ∂f_j/∂y_j)` with `f_j = y_j w_j`, and whether a clamp kink was hit.
pub fn unbiased_risk_estimate(rule: &PreparedRule, s: Sufficient) -> Result<(f64, bool)> {
    let d = rule.derivatives(s)?;
    Ok((stein_statistic(s, &d.weights, &d.derivatives), d.at_kink))
}

/// As [`unbiased_risk_estimate`] with finite-difference derivatives.
pub fn unbiased_risk_estimate_fd(rule: &PreparedRule, s: Sufficient) -> Result<f64> {
    let d = rule.derivatives_fd(s)?;
    Ok(stein_statistic(s, &d.weights, &d.derivatives))
}

fn stein_statistic(s: Sufficient, w: &[f64], dfdy: &[f64]) -> f64 {
    s.design
        .b()
        .iter()
        .zip(s.y)
        .zip(w)
        .zip(dfdy)
        .map(|(((b, y), w), d)| b * ((y * w).powi(2) - 2.0 * d))
        .sum()
}

/// The statistic for the unclamped weights `α q_j / q`.
pub fn unclamped_stein_statistic(s: Sufficient, spec: &crate::tau::QuadraticFormSpec, alpha: f64) -> f64 {
    let q = spec.evaluate(&s);
    let w: Vec<f64> = spec.q.iter().map(|qj| alpha * qj / q).collect();
    let d: Vec<f64> = spec
        .q
        .iter()
        .zip(s.y)
        .zip(&w)
        .map(|((qj, y), w)| w - 2.0 * alpha * qj * qj * y * y / (q * q))
        .collect();
    stein_statistic(s, &w, &d)
}

/// Monte Carlo comparison of the unbiased risk estimate with `Var(δ) − Var(x̄)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnbiasedRiskCheck {
    pub estimate: f64,
    pub estimate_se: f64,
    /// MC mean of `δ² − x̄²` (μ = 0)
    pub direct: f64,
    pub direct_se: f64,
    /// paired mean of the two per-draw quantities' difference
    pub difference: f64,
    pub difference_se: f64,
    pub kinks: u64,
}

pub fn unbiased_risk_check(
    design: &Design,
    tau2: f64,
    rule: &WeightRule,
    n_samples: usize,
    seed: u64,
) -> Result<UnbiasedRiskCheck> {
    check_inputs(&[tau2], n_samples)?;
    let prepared = rule.prepare(design)?;
    let n = design.n() as f64;
    let p = design.p();
    let kinks = std::sync::atomic::AtomicU64::new(0);
    let acc = mc::run(1, n_samples, 3, seed, |_, rng, draws, acc| {
        let (mut x, mut u2) = (vec![0.0; p], vec![0.0; p]);
        for _ in 0..draws {
            draw_grouped(design, tau2, rng, &mut x, &mut u2);
            let y = contrasts(design, &x);
            let s = Sufficient::new(design, &y, &u2);
            let d = prepared.derivatives(s)?;
            if d.at_kink {
                kinks.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
            }
            let u = stein_statistic(s, &d.weights, &d.derivatives);
            let xbar: f64 = design.multiplicities().iter().zip(&x).map(|(&m, x)| m as f64 * x).sum::<f64>() / n;
            let delta = xbar - crate::mu::shrinkage_term(design, &y, &d.weights);
            let direct = delta * delta - xbar * xbar;
            acc[0].push(u);
            acc[1].push(direct);
            acc[2].push(u - direct);
        }
        Ok(())
    })?;
    let acc = &acc[0];
    Ok(UnbiasedRiskCheck {
        estimate: acc[0].mean,
        estimate_se: acc[0].std_error(),
        direct: acc[1].mean,
        direct_se: acc[1].std_error(),
        difference: acc[2].mean,
        difference_se: acc[2].std_error(),
        kinks: kinks.into_inner(),
    })
}

/// Monte Carlo mean and standard error of a per-draw statistic of `(y, u²)`.
pub fn mc_mean<F>(design: &Design, tau2: f64, n_samples: usize, seed: u64, stat: F) -> Result<Welford>
where
    F: Fn(Sufficient) -> Result<f64> + Sync,
{
    check_inputs(&[tau2], n_samples)?;
    let (m, p) = (design.p() - 1, design.p());
    let acc = mc::run(1, n_samples, 1, seed, |_, rng: &mut RngStream, draws, acc| {
        let (mut y, mut u2) = (vec![0.0; m], vec![0.0; p]);
        for _ in 0..draws {
            draw_sufficient(design, tau2, rng, &mut y, &mut u2);
            acc[0].push(stat(Sufficient::new(design, &y, &u2))?);
        }
        Ok(())
    })?;
    Ok(acc[0][0])
}
