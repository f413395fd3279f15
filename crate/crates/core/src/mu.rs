//! Weighted-means estimators of the common mean.
//!
//! Every estimator has the form `δ = x̄ − Σ_j √b_j w_j y_j` with weights
//! `w_j` that are even functions of `y` and lie in `[0, t_j⁻²]`. A rule is
//! first [prepared](WeightRule::prepare) against a design, after which weights
//! for any `(y, u²)` are cheap to evaluate.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::canonical::{CanonicalForm, Design, Sufficient};
use crate::error::{Error, Result};
use crate::model::GroupedData;
use crate::numerics::log_sum_exp;
use crate::tau::{
    estimate_tau, mandel_paule_excess, FormTemplate, QuadraticFormSpec, TauEstimate, TauMethod,
    TAU_METHOD_NAMES,
};

/// Prior for `τ²` used by the generalized Bayes rule.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum PriorSpec {
    /// Explicit `(node, weight)` pairs; weights are normalized on use.
    Nodes(Vec<(f64, f64)>),
    /// `count` log-spaced nodes on `[lo·s², hi·s²]` plus a node at 0, with
    /// trapezoid weights for the density `1/(τ² + s²)`.
    LogGrid { lo: f64, hi: f64, count: usize },
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self::LogGrid { lo: 1e-6, hi: 1e4, count: 400 }
    }
}

impl PriorSpec {
    pub fn point(tau2: f64) -> Self {
        Self::Nodes(vec![(tau2, 1.0)])
    }

    /// Nodes and normalized weights for a design.
    pub fn discretize(&self, design: &Design) -> Result<Vec<(f64, f64)>> {
        let nodes = match self {
            Self::Nodes(v) => v.clone(),
            Self::LogGrid { lo, hi, count } => {
                if !(*lo > 0.0 && hi > lo) || *count < 2 {
                    return Err(Error::InvalidInput(format!(
                        "log grid needs 0 < lo < hi and count >= 2, got {lo}, {hi}, {count}"
                    )));
                }
                let s2 = design.mean_variance();
                let (a, b) = ((lo * s2).ln(), (hi * s2).ln());
                let mut pts = vec![0.0];
                pts.extend((0..*count).map(|k| (a + (b - a) * k as f64 / (*count - 1) as f64).exp()));
                let m = pts.len();
                (0..m)
                    .map(|k| {
                        let left = if k > 0 { pts[k] - pts[k - 1] } else { 0.0 };
                        let right = if k + 1 < m { pts[k + 1] - pts[k] } else { 0.0 };
                        (pts[k], 0.5 * (left + right) / (pts[k] + s2))
                    })
                    .collect()
            }
        };
        if nodes.is_empty() {
            return Err(Error::InvalidInput("prior has no nodes".into()));
        }
        if nodes.iter().any(|&(t, w)| !(t >= 0.0) || !(w >= 0.0) || !t.is_finite()) {
            return Err(Error::InvalidInput("prior nodes and weights must be >= 0".into()));
        }
        let total: f64 = nodes.iter().map(|n| n.1).sum();
        if !(total > 0.0) {
            return Err(Error::InvalidInput("prior weights sum to zero".into()));
        }
        Ok(nodes.into_iter().map(|(t, w)| (t, w / total)).collect())
    }
}

/// Shrinkage constant for Stein-type rules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Alpha {
    Value(f64),
    /// `n − 3`
    NMinus3,
    /// the largest constant guaranteed to improve on the sample mean
    Bound,
}

impl Alpha {
    fn resolve(&self, design: &Design, spec: &QuadraticFormSpec) -> Result<f64> {
        let a = match self {
            Self::Value(a) => *a,
            Self::NMinus3 => design.n() as f64 - 3.0,
            Self::Bound => crate::risk::xbar_improvement_alpha(design, spec)?,
        };
        if !(a > 0.0) || !a.is_finite() {
            return Err(Error::InvalidInput(format!("stein alpha must be positive, got {a}")));
        }
        Ok(a)
    }
}

impl fmt::Display for Alpha {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Value(a) => write!(f, "{a}"),
            Self::NMinus3 => write!(f, "n-3"),
            Self::Bound => write!(f, "bound"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum WeightRule {
    /// `w_j = (τ̂² + t_j²)⁻¹` for an estimated `τ²`
    Plugin(TauMethod),
    /// `w_j = (τ₀² + t_j²)⁻¹` for a fixed `τ₀²`
    Fixed(f64),
    SampleMean,
    GraybillDeal,
    Stein { form: FormTemplate, alpha: Alpha },
    Delta1,
    Delta0,
    ModifiedHedges,
    Bayes(PriorSpec),
}

pub const RULE_NAMES: &str =
    "mean, gd, dl, hedges, mp, reml, moment:q=..,r=.., delta1, delta0, mh, stein:q=..,r=..,alpha=.., bayes[:grid|:grid=LO:HI:N|:point=T], fixed:T";

impl FromStr for WeightRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = |what: &str| Error::InvalidInput(format!("{what}; valid rules: {RULE_NAMES}"));
        match s {
            "mean" | "xbar" => return Ok(Self::SampleMean),
            "gd" => return Ok(Self::GraybillDeal),
            "delta1" => return Ok(Self::Delta1),
            "delta0" => return Ok(Self::Delta0),
            "mh" => return Ok(Self::ModifiedHedges),
            "bayes" | "bayes:grid" => return Ok(Self::Bayes(PriorSpec::default())),
            _ => {}
        }
        if let Some(rest) = s.strip_prefix("stein:").or_else(|| (s == "stein").then_some("")) {
            let mut alpha = Alpha::NMinus3;
            let mut form_parts = Vec::new();
            for part in rest.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                match part.strip_prefix("alpha=") {
                    Some("n-3") => alpha = Alpha::NMinus3,
                    Some("bound") => alpha = Alpha::Bound,
                    Some(v) => {
                        alpha = Alpha::Value(
                            v.parse().map_err(|_| bad(&format!("bad alpha `{v}`")))?,
                        )
                    }
                    None => form_parts.push(part),
                }
            }
            let form = FormTemplate::parse(&form_parts.join(","))?;
            return Ok(Self::Stein { form, alpha });
        }
        if let Some(rest) = s.strip_prefix("fixed:") {
            let t: f64 = rest.parse().map_err(|_| bad(&format!("bad fixed tau2 `{rest}`")))?;
            if !(t >= 0.0) {
                return Err(bad("fixed tau2 must be >= 0"));
            }
            return Ok(Self::Fixed(t));
        }
        if let Some(rest) = s.strip_prefix("bayes:") {
            if let Some(v) = rest.strip_prefix("point=") {
                let t: f64 = v.parse().map_err(|_| bad(&format!("bad prior point `{v}`")))?;
                return Ok(Self::Bayes(PriorSpec::point(t)));
            }
            if let Some(v) = rest.strip_prefix("grid=") {
                let parts: Vec<&str> = v.split(':').collect();
                if parts.len() != 3 {
                    return Err(bad("bayes grid is LO:HI:COUNT"));
                }
                let lo = parts[0].parse().map_err(|_| bad("bad grid lo"))?;
                let hi = parts[1].parse().map_err(|_| bad("bad grid hi"))?;
                let count = parts[2].parse().map_err(|_| bad("bad grid count"))?;
                return Ok(Self::Bayes(PriorSpec::LogGrid { lo, hi, count }));
            }
            return Err(bad(&format!("unknown bayes prior `{rest}`")));
        }
        match s.parse::<TauMethod>() {
            Ok(m) => Ok(Self::Plugin(m)),
            Err(_) => Err(bad(&format!("unknown rule `{s}` (tau methods: {TAU_METHOD_NAMES})"))),
        }
    }
}

impl fmt::Display for WeightRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Plugin(m) => write!(f, "{m}"),
            Self::Fixed(t) => write!(f, "fixed:{t}"),
            Self::SampleMean => write!(f, "mean"),
            Self::GraybillDeal => write!(f, "gd"),
            Self::Stein { form, alpha } => write!(f, "stein:{form},alpha={alpha}"),
            Self::Delta1 => write!(f, "delta1"),
            Self::Delta0 => write!(f, "delta0"),
            Self::ModifiedHedges => write!(f, "mh"),
            Self::Bayes(PriorSpec::LogGrid { lo, hi, count }) => {
                write!(f, "bayes:grid={lo}:{hi}:{count}")
            }
            Self::Bayes(PriorSpec::Nodes(v)) if v.len() == 1 => write!(f, "bayes:point={}", v[0].0),
            Self::Bayes(PriorSpec::Nodes(v)) => write!(f, "bayes:nodes({})", v.len()),
        }
    }
}

impl WeightRule {
    /// Shrinkage rules are defined only for more than three studies.
    pub fn requires_n_above_3(&self) -> bool {
        matches!(self, Self::Stein { .. } | Self::Delta1 | Self::Delta0 | Self::ModifiedHedges)
    }

    pub fn prepare(&self, design: &Design) -> Result<PreparedRule> {
        let n = design.n();
        if self.requires_n_above_3() && n <= 3 {
            return Err(Error::InvalidForN { rule: self.to_string(), n });
        }
        let kind = match self {
            Self::Plugin(TauMethod::DerSimonianLaird) => {
                Kind::Moment(MomentPlugin::new(QuadraticFormSpec::inverse_variance(design), design, None))
            }
            Self::Plugin(TauMethod::Hedges) => {
                Kind::Moment(MomentPlugin::new(QuadraticFormSpec::unit(design), design, None))
            }
            Self::Plugin(TauMethod::Moment(t)) => {
                Kind::Moment(MomentPlugin::new(t.resolve(design)?, design, None))
            }
            Self::Plugin(m) => Kind::Iterative(m.clone()),
            Self::ModifiedHedges => Kind::Moment(MomentPlugin::new(
                QuadraticFormSpec::unit(design),
                design,
                Some(n as f64 - 3.0),
            )),
            Self::Fixed(t) => Kind::Fixed(*t),
            Self::SampleMean => Kind::Zero,
            Self::GraybillDeal => Kind::Fixed(0.0),
            Self::Stein { form, alpha } => {
                let spec = form.resolve(design)?;
                let alpha = alpha.resolve(design, &spec)?;
                Kind::Stein { spec, alpha }
            }
            Self::Delta1 => Kind::Stein { spec: QuadraticFormSpec::unit(design), alpha: n as f64 - 3.0 },
            Self::Delta0 => Kind::Stein {
                spec: QuadraticFormSpec::inverse_variance(design),
                alpha: n as f64 - 1.0,
            },
            Self::Bayes(prior) => {
                let nodes = prior.discretize(design)?;
                Kind::Bayes {
                    log_prior: nodes.iter().map(|&(_, w)| w.ln()).collect(),
                    nodes: nodes.into_iter().map(|(t, _)| t).collect(),
                }
            }
        };
        Ok(PreparedRule { name: self.to_string(), kind })
    }
}

#[derive(Debug, Clone)]
struct MomentPlugin {
    spec: QuadraticFormSpec,
    centre: f64,
    denominator: f64,
}

impl MomentPlugin {
    fn new(spec: QuadraticFormSpec, d: &Design, denominator: Option<f64>) -> Self {
        let centre = spec.q.iter().zip(d.t2()).map(|(q, t)| q * t).sum::<f64>()
            + d.multiplicities()
                .iter()
                .zip(d.group_variances())
                .zip(&spec.r)
                .map(|((&m, s), r)| (m as f64 - 1.0) * r * s)
                .sum::<f64>();
        let denominator = denominator.unwrap_or_else(|| spec.total_weight(d));
        Self { spec, centre, denominator }
    }

    fn raw(&self, s: &Sufficient) -> f64 {
        (self.spec.evaluate(s) - self.centre) / self.denominator
    }
}

#[derive(Debug, Clone)]
enum Kind {
    Zero,
    Fixed(f64),
    Moment(MomentPlugin),
    Iterative(TauMethod),
    Stein { spec: QuadraticFormSpec, alpha: f64 },
    Bayes { nodes: Vec<f64>, log_prior: Vec<f64> },
}

/// Weights and their derivatives `∂f_j/∂y_j` for `f_j = y_j w_j`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightDerivatives {
    pub weights: Vec<f64>,
    pub derivatives: Vec<f64>,
    /// the evaluation point sits on a clamp boundary; one-sided derivative used
    pub at_kink: bool,
}

/// A rule bound to a design.
#[derive(Debug, Clone)]
pub struct PreparedRule {
    name: String,
    kind: Kind,
}

const KINK_TOL: f64 = 1e-12;

impl PreparedRule {
    pub fn name(&self) -> &str {
        &self.name
    }

    /// True when the weights are data independent.
    pub fn is_constant(&self) -> bool {
        matches!(self.kind, Kind::Zero | Kind::Fixed(_))
    }

    /// Writes `w_j` into `out` and returns the plug-in `τ̂²` when there is one.
    pub fn weights_into(&self, s: Sufficient, out: &mut Vec<f64>) -> Result<Option<TauEstimate>> {
        let t2 = s.design.t2();
        out.clear();
        let tau = match &self.kind {
            Kind::Zero => {
                out.resize(t2.len(), 0.0);
                None
            }
            Kind::Fixed(t) => {
                out.extend(t2.iter().map(|tj| 1.0 / (t + tj)));
                None
            }
            Kind::Moment(m) => {
                let raw = m.raw(&s);
                let tau = raw.max(0.0);
                out.extend(t2.iter().map(|tj| 1.0 / (tau + tj)));
                Some(TauEstimate { value: tau, raw_value: raw, method: self.name.clone(), iterations: 0 })
            }
            Kind::Iterative(method) => {
                let est = estimate_tau(s, method)?;
                out.extend(t2.iter().map(|tj| 1.0 / (est.value + tj)));
                Some(est)
            }
            Kind::Stein { spec, alpha } => {
                let q = spec.evaluate(&s);
                out.extend(spec.q.iter().zip(t2).map(|(qj, tj)| {
                    if q > 0.0 {
                        (alpha * qj / q).min(1.0 / tj)
                    } else {
                        1.0 / tj
                    }
                }));
                None
            }
            Kind::Bayes { nodes, log_prior } => {
                let post = posterior(s, nodes, log_prior)?;
                out.extend(t2.iter().map(|tj| {
                    nodes.iter().zip(&post).map(|(t, p)| p / (t + tj)).sum::<f64>()
                }));
                None
            }
        };
        for (w, tj) in out.iter_mut().zip(t2) {
            *w = w.clamp(0.0, 1.0 / tj);
        }
        Ok(tau)
    }

    pub fn weights(&self, s: Sufficient) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(s.y.len());
        self.weights_into(s, &mut out)?;
        Ok(out)
    }

    /// `∂(y_j w_j)/∂y_j`: analytic where available, central differences for REML.
    pub fn derivatives(&self, s: Sufficient) -> Result<WeightDerivatives> {
        let t2 = s.design.t2();
        let weights = self.weights(s)?;
        let mut at_kink = false;
        let derivatives = match &self.kind {
            Kind::Zero => vec![0.0; t2.len()],
            Kind::Fixed(_) => weights.clone(),
            Kind::Moment(m) => {
                let raw = m.raw(&s);
                at_kink = raw.abs() <= KINK_TOL * (1.0 + m.centre.abs() / m.denominator);
                (0..t2.len())
                    .map(|j| {
                        let dtau = if raw > 0.0 { 2.0 * m.spec.q[j] * s.y[j] / m.denominator } else { 0.0 };
                        weights[j] - s.y[j] * weights[j] * weights[j] * dtau
                    })
                    .collect()
            }
            Kind::Iterative(TauMethod::MandelPaule) => {
                let tau = estimate_tau(s, &TauMethod::MandelPaule)?.value;
                let slope: f64 = -s.y.iter().zip(t2).map(|(y, t)| y * y / (tau + t).powi(2)).sum::<f64>()
                    - s.replicated().map(|(m, s2, u)| m * u / (tau + s2).powi(2)).sum::<f64>();
                at_kink = tau == 0.0 && mandel_paule_excess(&s, 0.0).abs() <= KINK_TOL * s.n() as f64;
                (0..t2.len())
                    .map(|j| {
                        let dtau = if tau > 0.0 { -(2.0 * s.y[j] / (tau + t2[j])) / slope } else { 0.0 };
                        weights[j] - s.y[j] * weights[j] * weights[j] * dtau
                    })
                    .collect()
            }
            Kind::Iterative(_) => return self.derivatives_fd(s),
            Kind::Stein { spec, alpha } => {
                let q = spec.evaluate(&s);
                (0..t2.len())
                    .map(|j| {
                        let free = if q > 0.0 { alpha * spec.q[j] / q } else { f64::INFINITY };
                        let cap = 1.0 / t2[j];
                        if (free - cap).abs() <= KINK_TOL * cap {
                            at_kink = true;
                        }
                        if free < cap {
                            weights[j] - 2.0 * alpha * spec.q[j].powi(2) * s.y[j].powi(2) / (q * q)
                        } else {
                            weights[j]
                        }
                    })
                    .collect()
            }
            Kind::Bayes { nodes, log_prior } => {
                let post = posterior(s, nodes, log_prior)?;
                (0..t2.len())
                    .map(|j| {
                        let mean = weights[j];
                        let second: f64 = nodes.iter().zip(&post).map(|(t, p)| p / (t + t2[j]).powi(2)).sum();
                        weights[j] - s.y[j].powi(2) * (second - mean * mean)
                    })
                    .collect()
            }
        };
        Ok(WeightDerivatives { weights, derivatives, at_kink })
    }

    /// Central finite differences of `f_j = y_j w_j(y)` in `y_j`.
    pub fn derivatives_fd(&self, s: Sufficient) -> Result<WeightDerivatives> {
        let t2 = s.design.t2();
        let weights = self.weights(s)?;
        let mut y = s.y.to_vec();
        let mut derivatives = Vec::with_capacity(t2.len());
        let mut buf = Vec::new();
        for j in 0..t2.len() {
            let h = 1e-5 * s.y[j].abs().max(t2[j].sqrt());
            y[j] = s.y[j] + h;
            self.weights_into(Sufficient::new(s.design, &y, s.u2), &mut buf)?;
            let up = y[j] * buf[j];
            y[j] = s.y[j] - h;
            self.weights_into(Sufficient::new(s.design, &y, s.u2), &mut buf)?;
            let down = y[j] * buf[j];
            y[j] = s.y[j];
            derivatives.push((up - down) / (2.0 * h));
        }
        Ok(WeightDerivatives { weights, derivatives, at_kink: false })
    }
}

/// Normalized posterior masses over the prior nodes.
fn posterior(s: Sufficient, nodes: &[f64], log_prior: &[f64]) -> Result<Vec<f64>> {
    let logp: Vec<f64> = nodes
        .iter()
        .zip(log_prior)
        .map(|(&t, lp)| lp - crate::tau::restricted_loglik(s, t))
        .collect();
    let norm = log_sum_exp(&logp);
    if !norm.is_finite() {
        return Err(Error::NumericalFailure(format!(
            "posterior over {} prior nodes has no finite mass (log normalizer {norm})",
            nodes.len()
        )));
    }
    Ok(logp.into_iter().map(|l| (l - norm).exp()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MuEstimate {
    pub value: f64,
    pub rule: String,
    pub weights_w: Vec<f64>,
    /// Weights on group means, `Σ ω_i = 1`; a study in group `i` carries `ω_i/ν_i`.
    pub weights_omega: Vec<f64>,
    pub tau_estimate: Option<TauEstimate>,
    /// set when only one distinct variance is present and δ is the sample mean
    pub sample_mean_only: bool,
}

/// `ω_i = ν_i/n − Σ_j w_j A_ij`.
pub fn omega_weights(design: &Design, w: &[f64]) -> Vec<f64> {
    let n = design.n() as f64;
    design
        .a()
        .iter()
        .zip(design.multiplicities())
        .map(|(row, &m)| m as f64 / n - row.iter().zip(w).map(|(a, w)| a * w).sum::<f64>())
        .collect()
}

/// `δ = x̄ − Σ_j √b_j w_j y_j`.
pub fn delta_from_weights(cf: &CanonicalForm, w: &[f64]) -> f64 {
    cf.grand_mean() - shrinkage_term(cf.design(), cf.y(), w)
}

/// `Σ_j √b_j w_j y_j`.
pub fn shrinkage_term(design: &Design, y: &[f64], w: &[f64]) -> f64 {
    design.b().iter().zip(y).zip(w).map(|((b, y), w)| b.sqrt() * w * y).sum()
}

pub fn estimate_mu(cf: &CanonicalForm, rule: &WeightRule) -> Result<MuEstimate> {
    let prepared = rule.prepare(cf.design())?;
    let mut w = Vec::new();
    let tau_estimate = prepared.weights_into(cf.sufficient(), &mut w)?;
    Ok(MuEstimate {
        value: delta_from_weights(cf, &w),
        rule: prepared.name.clone(),
        weights_omega: omega_weights(cf.design(), &w),
        weights_w: w,
        tau_estimate,
        sample_mean_only: false,
    })
}

/// As [`estimate_mu`], falling back to the sample mean when `p = 1`.
pub fn estimate_mu_grouped(g: &GroupedData, rule: &WeightRule) -> Result<MuEstimate> {
    if g.p() == 1 {
        return Ok(MuEstimate {
            value: g.grand_mean(),
            rule: "mean".into(),
            weights_w: vec![],
            weights_omega: vec![1.0],
            tau_estimate: None,
            sample_mean_only: true,
        });
    }
    estimate_mu(&crate::canonical::transform(g)?, rule)
}

/// `min(α q_j / q, t_j⁻²)` with `q = Σ q_ℓ y_ℓ² + Σ (ν_i − 1) r_i u_i²`.
pub fn stein_weights(s: Sufficient, spec: &QuadraticFormSpec, alpha: f64) -> Result<Vec<f64>> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidInput(format!("alpha must be positive, got {alpha}")));
    }
    spec.check_dims(s.design)?;
    PreparedRule { name: "stein".into(), kind: Kind::Stein { spec: spec.clone(), alpha } }.weights(s)
}

pub fn bayes_estimator(cf: &CanonicalForm, prior: &PriorSpec) -> Result<MuEstimate> {
    estimate_mu(cf, &WeightRule::Bayes(prior.clone()))
}
