//! Estimators of the between-study variance `τ²`.
//!
//! Every estimator works on the sufficient statistics `(y, u²)` of a
//! [`Sufficient`] view, so the same code runs on observed data and inside
//! Monte Carlo loops.

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::canonical::{Design, Sufficient};
use crate::error::{Error, Result};
use crate::model::GroupedData;
use crate::numerics::{solve_bracketed, RootBracket};

/// Coefficients of the quadratic form `Σ q_j y_j² + Σ (ν_i − 1) r_i u_i²`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadraticFormSpec {
    pub q: Vec<f64>,
    pub r: Vec<f64>,
}

impl QuadraticFormSpec {
    pub fn new(q: Vec<f64>, r: Vec<f64>) -> Result<Self> {
        if q.iter().chain(&r).any(|&c| !(c > 0.0) || !c.is_finite()) {
            return Err(Error::InvalidInput("quadratic form coefficients must be positive".into()));
        }
        Ok(Self { q, r })
    }

    /// `q_j = r_i = 1`.
    pub fn unit(design: &Design) -> Self {
        Self { q: vec![1.0; design.p() - 1], r: vec![1.0; design.p()] }
    }

    /// `q_j = t_j⁻²`, `r_i = s_i⁻²`.
    pub fn inverse_variance(design: &Design) -> Self {
        Self {
            q: design.t2().iter().map(|t| 1.0 / t).collect(),
            r: design.group_variances().iter().map(|s| 1.0 / s).collect(),
        }
    }

    pub fn check_dims(&self, design: &Design) -> Result<()> {
        if self.q.len() != design.p() - 1 || self.r.len() != design.p() {
            return Err(Error::InvalidInput(format!(
                "quadratic form has {} q and {} r coefficients, design needs {} and {}",
                self.q.len(),
                self.r.len(),
                design.p() - 1,
                design.p()
            )));
        }
        Ok(())
    }

    /// `Σ q_j y_j² + Σ (ν_i − 1) r_i u_i²`.
    pub fn evaluate(&self, s: &Sufficient) -> f64 {
        let nu = s.design.multiplicities();
        let ys: f64 = self.q.iter().zip(s.y).map(|(q, y)| q * y * y).sum();
        let us: f64 = (0..s.p()).map(|i| (nu[i] as f64 - 1.0) * self.r[i] * s.u2[i]).sum();
        ys + us
    }

    /// `Σ q_j + Σ (ν_i − 1) r_i`.
    pub fn total_weight(&self, design: &Design) -> f64 {
        let nu = design.multiplicities();
        self.q.iter().sum::<f64>()
            + self.r.iter().zip(nu).map(|(r, &m)| (m as f64 - 1.0) * r).sum::<f64>()
    }
}

/// A coefficient family resolved against a design when it becomes known.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Coefficients {
    /// all ones
    Unit,
    /// `t_j⁻²` for `q`, `s_i⁻²` for `r`
    InverseVariance,
    /// `b_j⁻¹` for `q`, `s_i⁻²` for `r`
    InverseB,
    Values(Vec<f64>),
}

impl Coefficients {
    fn parse(text: &str) -> Result<Self> {
        match text {
            "unit" | "1" => Ok(Self::Unit),
            "inv" => Ok(Self::InverseVariance),
            "invb" => Ok(Self::InverseB),
            list => list
                .split(':')
                .map(|v| {
                    v.trim().parse::<f64>().map_err(|_| {
                        Error::InvalidInput(format!("bad coefficient `{v}` (expected unit|inv|invb|v1:v2:...)"))
                    })
                })
                .collect::<Result<Vec<_>>>()
                .map(Self::Values),
        }
    }

    fn resolve_q(&self, design: &Design) -> Vec<f64> {
        match self {
            Self::Unit => vec![1.0; design.p() - 1],
            Self::InverseVariance => design.t2().iter().map(|t| 1.0 / t).collect(),
            Self::InverseB => design.b().iter().map(|b| 1.0 / b).collect(),
            Self::Values(v) => v.clone(),
        }
    }

    fn resolve_r(&self, design: &Design) -> Vec<f64> {
        match self {
            Self::Unit => vec![1.0; design.p()],
            Self::InverseVariance | Self::InverseB => {
                design.group_variances().iter().map(|s| 1.0 / s).collect()
            }
            Self::Values(v) => v.clone(),
        }
    }
}

impl fmt::Display for Coefficients {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Unit => write!(f, "unit"),
            Self::InverseVariance => write!(f, "inv"),
            Self::InverseB => write!(f, "invb"),
            Self::Values(v) => {
                let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                write!(f, "{}", parts.join(":"))
            }
        }
    }
}

/// Design-independent description of a quadratic form, e.g. `q=unit,r=inv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FormTemplate {
    pub q: Coefficients,
    pub r: Coefficients,
}

impl FormTemplate {
    pub fn unit() -> Self {
        Self { q: Coefficients::Unit, r: Coefficients::Unit }
    }

    pub fn resolve(&self, design: &Design) -> Result<QuadraticFormSpec> {
        let spec = QuadraticFormSpec::new(self.q.resolve_q(design), self.r.resolve_r(design))?;
        spec.check_dims(design)?;
        Ok(spec)
    }

    /// Parses comma separated `q=...` / `r=...` assignments; missing entries default to `unit`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Self::unit();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidInput(format!("expected key=value, got `{part}`")))?;
            match key.trim() {
                "q" => out.q = Coefficients::parse(value.trim())?,
                "r" => out.r = Coefficients::parse(value.trim())?,
                other => {
                    return Err(Error::InvalidInput(format!("unknown quadratic form key `{other}`")))
                }
            }
        }
        Ok(out)
    }
}

impl fmt::Display for FormTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "q={},r={}", self.q, self.r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TauEstimate {
    /// `max(raw_value, 0)`
    pub value: f64,
    pub raw_value: f64,
    pub method: String,
    /// zero for closed forms
    pub iterations: usize,
}

impl TauEstimate {
    fn closed(raw: f64, method: &str) -> Self {
        Self { value: raw.max(0.0), raw_value: raw, method: method.to_string(), iterations: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum TauMethod {
    DerSimonianLaird,
    Hedges,
    MandelPaule,
    Reml,
    Moment(FormTemplate),
}

pub const TAU_METHOD_NAMES: &str = "dl, hedges, mp, reml, moment:q=..,r=..";

impl FromStr for TauMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "dl" => Ok(Self::DerSimonianLaird),
            "hedges" | "h" => Ok(Self::Hedges),
            "mp" => Ok(Self::MandelPaule),
            "reml" => Ok(Self::Reml),
            "moment" => Ok(Self::Moment(FormTemplate::unit())),
            _ => match s.strip_prefix("moment:") {
                Some(rest) => Ok(Self::Moment(FormTemplate::parse(rest)?)),
                None => Err(Error::InvalidInput(format!(
                    "unknown tau method `{s}`; valid: {TAU_METHOD_NAMES}"
                ))),
            },
        }
    }
}

impl fmt::Display for TauMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DerSimonianLaird => write!(f, "dl"),
            Self::Hedges => write!(f, "hedges"),
            Self::MandelPaule => write!(f, "mp"),
            Self::Reml => write!(f, "reml"),
            Self::Moment(t) => write!(f, "moment:{t}"),
        }
    }
}

/// Runs `method` with default settings.
pub fn estimate_tau(s: Sufficient, method: &TauMethod) -> Result<TauEstimate> {
    match method {
        TauMethod::DerSimonianLaird => Ok(dersimonian_laird(s)),
        TauMethod::Hedges => Ok(hedges(s)),
        TauMethod::MandelPaule => mandel_paule(s),
        TauMethod::Reml => reml(s, None, REML_TOL, REML_MAX_ITER),
        TauMethod::Moment(t) => {
            let spec = t.resolve(s.design)?;
            Ok(moment_estimator(s, &spec))
        }
    }
}

fn two_point(s: &Sufficient) -> Option<f64> {
    (s.n() == 2 && s.p() == 2).then(|| s.y[0] * s.y[0] - s.design.t2()[0])
}

/// Raw (untruncated) moment estimate for the given quadratic form.
pub fn moment_raw(s: Sufficient, spec: &QuadraticFormSpec) -> f64 {
    let d = s.design;
    let centre: f64 = spec.q.iter().zip(d.t2()).map(|(q, t)| q * t).sum::<f64>()
        + d.multiplicities()
            .iter()
            .zip(d.group_variances())
            .zip(&spec.r)
            .map(|((&m, s2), r)| (m as f64 - 1.0) * r * s2)
            .sum::<f64>();
    (spec.evaluate(&s) - centre) / spec.total_weight(d)
}

pub fn moment_estimator(s: Sufficient, spec: &QuadraticFormSpec) -> TauEstimate {
    TauEstimate::closed(moment_raw(s, spec), "moment")
}

pub fn dersimonian_laird(s: Sufficient) -> TauEstimate {
    if let Some(raw) = two_point(&s) {
        return TauEstimate::closed(raw, "dl");
    }
    let spec = QuadraticFormSpec::inverse_variance(s.design);
    TauEstimate::closed(moment_raw(s, &spec), "dl")
}

pub fn hedges(s: Sufficient) -> TauEstimate {
    if let Some(raw) = two_point(&s) {
        return TauEstimate::closed(raw, "hedges");
    }
    let spec = QuadraticFormSpec::unit(s.design);
    TauEstimate::closed(moment_raw(s, &spec), "hedges")
}

/// Left side minus right side of the Mandel–Paule equation.
pub fn mandel_paule_excess(s: &Sufficient, tau2: f64) -> f64 {
    let ys: f64 = s.y.iter().zip(s.design.t2()).map(|(y, t)| y * y / (tau2 + t)).sum();
    let us: f64 = s.replicated().map(|(m, s2, u)| m * u / (tau2 + s2)).sum();
    ys + us - (s.n() as f64 - 1.0)
}

const MP_TOL: f64 = 1e-12;

pub fn mandel_paule(s: Sufficient) -> Result<TauEstimate> {
    if let Some(raw) = two_point(&s) {
        return Ok(TauEstimate::closed(raw, "mp"));
    }
    if mandel_paule_excess(&s, 0.0) <= 0.0 {
        return Ok(TauEstimate { value: 0.0, raw_value: 0.0, method: "mp".into(), iterations: 0 });
    }
    // the excess at τ² is below q∞/τ² − (n − 1)
    let mut hi = s.q_infinity() / (s.n() as f64 - 1.0);
    while mandel_paule_excess(&s, hi) > 0.0 {
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::NumericalFailure("Mandel-Paule bracket diverged".into()));
        }
    }
    let evals = Cell::new(0usize);
    let root = solve_bracketed(
        |t| {
            evals.set(evals.get() + 1);
            mandel_paule_excess(&s, t)
        },
        RootBracket::new(0.0, hi, MP_TOL),
    )?;
    Ok(TauEstimate { value: root, raw_value: root, method: "mp".into(), iterations: evals.get() })
}

pub const REML_TOL: f64 = 1e-10;
pub const REML_MAX_ITER: usize = 500;

/// One step of the REML fixed-point map, before truncation.
pub fn reml_update(s: &Sufficient, tau2: f64) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (y, t) in s.y.iter().zip(s.design.t2()) {
        let w = 1.0 / (tau2 + t).powi(2);
        num += (y * y - t) * w;
        den += w;
    }
    for (m, s2, u) in s.replicated() {
        let w = m / (tau2 + s2).powi(2);
        num += (u - s2) * w;
        den += w;
    }
    num / den
}

/// REML by fixed-point iteration from `start` (DerSimonian–Laird when `None`).
///
/// Pairs of steps are combined by Aitken extrapolation, which rescues the
/// slow linear convergence seen when the map's slope is close to one.
/// `max_iter` counts evaluations of the map.
pub fn reml(s: Sufficient, start: Option<f64>, tol: f64, max_iter: usize) -> Result<TauEstimate> {
    if let Some(raw) = two_point(&s) {
        return Ok(TauEstimate::closed(raw, "reml"));
    }
    let start = start.unwrap_or_else(|| dersimonian_laird(s).value);
    if !(start >= 0.0) {
        return Err(Error::InvalidInput(format!("REML start must be >= 0, got {start}")));
    }
    let scale = s.design.mean_variance();
    let done = |a: f64, b: f64| (b - a).abs() <= tol * (b + scale);
    let found = |value, raw, it| TauEstimate { value, raw_value: raw, method: "reml".into(), iterations: it };
    let mut tau2 = start;
    let mut it = 0;
    while it < max_iter {
        let raw1 = reml_update(&s, tau2);
        let x1 = raw1.max(0.0);
        it += 1;
        if done(tau2, x1) {
            return Ok(found(x1, raw1, it));
        }
        if it == max_iter {
            tau2 = x1;
            break;
        }
        let raw2 = reml_update(&s, x1);
        let x2 = raw2.max(0.0);
        it += 1;
        if done(x1, x2) {
            return Ok(found(x2, raw2, it));
        }
        let denom = x2 - 2.0 * x1 + tau2;
        let jump = tau2 - (x1 - tau2).powi(2) / denom;
        // only extrapolate onwards: accelerating steps make Aitken jump backwards
        let onwards = (jump - x2) * (x2 - tau2) >= 0.0;
        tau2 = if denom != 0.0 && jump.is_finite() && jump >= 0.0 && onwards { jump } else { x2 };
    }
    // Near-tangent score: the map creeps. Bracket the stationary point it heads for.
    match score_root_from(&s, tau2, scale, tol) {
        Some(v) if v > 0.0 => Ok(found(v, v, max_iter)),
        Some(_) => Ok(found(0.0, reml_update(&s, 0.0).min(0.0), max_iter)),
        None => Err(Error::NonConvergence { iterations: max_iter, last: tau2 }),
    }
}

/// Root of the restricted score reached by descending from `from`; `Some(0)` at the boundary.
fn score_root_from(s: &Sufficient, from: f64, scale: f64, tol: f64) -> Option<f64> {
    let score = |t: f64| restricted_score(*s, t);
    let solve = |lo: f64, hi: f64| {
        solve_bracketed(score, RootBracket::new(lo, hi, tol)).ok()
    };
    if score(from) > 0.0 {
        const STEPS: usize = 400;
        let mut prev = from;
        for k in 1..=STEPS {
            let t = from * (1.0 - k as f64 / STEPS as f64);
            if score(t) <= 0.0 {
                return solve(t, prev);
            }
            prev = t;
        }
        Some(0.0)
    } else {
        let mut lo = from;
        let mut hi = 2.0 * from + scale;
        while score(hi) < 0.0 {
            if hi > 1e12 * scale {
                return None;
            }
            lo = hi;
            hi = 2.0 * hi + scale;
        }
        solve(lo, hi)
    }
}

/// Cochran-type statistic `T = Σ y_j²/t_j² + Σ (ν_i − 1) u_i²/s_i²`.
pub fn cochran_statistic(s: Sufficient) -> f64 {
    s.q_zero()
}

/// Heterogeneity index `max(0, (T − n + 1)/T)`.
pub fn i_squared(s: Sufficient) -> f64 {
    let t = s.q_zero();
    if t <= 0.0 {
        return 0.0;
    }
    ((t - s.n() as f64 + 1.0) / t).max(0.0)
}

/// Negative restricted log-likelihood in canonical form.
pub fn restricted_loglik(s: Sufficient, tau2: f64) -> f64 {
    let d = s.design;
    let mut total = (d.n() as f64).ln();
    for (y, t) in s.y.iter().zip(d.t2()) {
        total += y * y / (tau2 + t) + (tau2 + t).ln();
    }
    for (m, s2, u) in s.replicated() {
        total += m * (u / (tau2 + s2) + (tau2 + s2).ln());
    }
    0.5 * total
}

/// `∂𝓛/∂τ²` of [`restricted_loglik`].
pub fn restricted_score(s: Sufficient, tau2: f64) -> f64 {
    let mut g = 0.0;
    for (y, t) in s.y.iter().zip(s.design.t2()) {
        let v = tau2 + t;
        g += 1.0 / v - y * y / (v * v);
    }
    for (m, s2, u) in s.replicated() {
        let v = tau2 + s2;
        g += m * (1.0 / v - u / (v * v));
    }
    0.5 * g
}

/// Negative restricted log-likelihood from group means and within-group variances.
pub fn restricted_loglik_grouped(g: &GroupedData, tau2: f64) -> f64 {
    let w: Vec<f64> = g
        .multiplicities
        .iter()
        .zip(&g.group_variances)
        .map(|(&m, s)| m as f64 / (tau2 + s))
        .collect();
    let total: f64 = w.iter().sum();
    let xt = w.iter().zip(&g.group_means).map(|(w, x)| w * x).sum::<f64>() / total;
    let mut out = total.ln();
    for i in 0..g.p() {
        let m = g.multiplicities[i] as f64;
        let v = tau2 + g.group_variances[i];
        out += w[i] * (g.group_means[i] - xt).powi(2) + m * v.ln() + (m - 1.0) * g.within_variances[i] / v;
    }
    0.5 * out
}

/// Negative restricted log-likelihood over raw `(x_i, s_i²)` pairs.
pub fn restricted_loglik_raw(effects: &[f64], variances: &[f64], tau2: f64) -> f64 {
    let w: Vec<f64> = variances.iter().map(|s| 1.0 / (tau2 + s)).collect();
    let total: f64 = w.iter().sum();
    let xt = w.iter().zip(effects).map(|(w, x)| w * x).sum::<f64>() / total;
    let mut out = total.ln();
    for (k, x) in effects.iter().enumerate() {
        out += w[k] * (x - xt).powi(2) - w[k].ln();
    }
    0.5 * out
}
