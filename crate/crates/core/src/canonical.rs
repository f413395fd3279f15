//! Canonical representation of the restricted likelihood.
//!
//! For distinct reported variances `s_1² < … < s_p²` with multiplicities
//! `ν_i`, the polynomial `Q(v) = Σ_i ν_i Π_{k≠i}(v + s_k²)` has `p − 1` real
//! roots `−t_j²`, one in each gap `(s_j², s_{j+1}²)`. The contrasts
//! `y_j = Σ_i A_ij x_i / √b_j` are independent `N(0, τ² + t_j²)` and carry all
//! the restricted-likelihood information about `τ²` besides the within-group
//! variances.
//!
//! Roots are found on the secular form `Σ_i ν_i / (s_i² − t) = 0`, which has
//! the same zeros as `Q(−t)` inside each gap. Each root is located as an
//! offset from its nearer pole so that the differences `s_i² − t_j²` are
//! available to full relative precision; everything downstream (`A`, `b`) is
//! built from those differences.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::GroupedData;
use crate::numerics::{solve_bracketed, RootBracket};

/// Design-level quantities: depend only on `s²` and `ν`, never on the data.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    s2: Vec<f64>,
    nu: Vec<usize>,
    n: usize,
    t2: Vec<f64>,
    /// `diff[i][j] = s_i² − t_j²`
    diff: Vec<Vec<f64>>,
    b: Vec<f64>,
    a: Vec<Vec<f64>>,
    s2_mean: f64,
}

impl Design {
    pub fn new(group_variances: &[f64], multiplicities: &[usize]) -> Result<Self> {
        let p = group_variances.len();
        if multiplicities.len() != p {
            return Err(Error::InvalidInput(
                "group variances and multiplicities differ in length".into(),
            ));
        }
        if p < 2 {
            return Err(Error::Unsupported(format!(
                "canonical form needs at least 2 distinct variances, got p = {p}"
            )));
        }
        if group_variances.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput("group variances must be positive and finite".into()));
        }
        if group_variances.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput("group variances must be strictly increasing".into()));
        }
        if multiplicities.contains(&0) {
            return Err(Error::InvalidInput("multiplicities must be >= 1".into()));
        }
        let s2 = group_variances.to_vec();
        let nu = multiplicities.to_vec();
        let n: usize = nu.iter().sum();
        let s2_mean = nu.iter().zip(&s2).map(|(&m, &v)| m as f64 * v).sum::<f64>() / n as f64;

        let (t2, diff) = find_roots_with_offsets(&s2, &nu)?;
        let (a, b) = a_matrix_from_offsets(&nu, &diff)?;
        Ok(Self { s2, nu, n, t2, diff, b, a, s2_mean })
    }

    pub fn from_grouped(g: &GroupedData) -> Result<Self> {
        Self::new(&g.group_variances, &g.multiplicities)
    }

    pub fn p(&self) -> usize {
        self.s2.len()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn group_variances(&self) -> &[f64] {
        &self.s2
    }

    pub fn multiplicities(&self) -> &[usize] {
        &self.nu
    }

    /// Roots `t_j²`, ascending.
    pub fn t2(&self) -> &[f64] {
        &self.t2
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    /// `p × (p − 1)` matrix, row-major by group.
    pub fn a(&self) -> &[Vec<f64>] {
        &self.a
    }

    /// `s² = Σ ν_i s_i² / n`.
    pub fn mean_variance(&self) -> f64 {
        self.s2_mean
    }

    /// `s_i² − t_j²` to full relative precision.
    pub fn offset(&self, i: usize, j: usize) -> f64 {
        self.diff[i][j]
    }

    /// `Σ_j b_j / (τ² + t_j²) = Var(x̄) − Var(x̃)`.
    pub fn variance_gap(&self, tau2: f64) -> f64 {
        self.b.iter().zip(&self.t2).map(|(b, t)| b / (tau2 + t)).sum()
    }

    /// Evaluates `Q(v)` in product form.
    pub fn q_eval(&self, v: f64) -> f64 {
        q_eval_product(&self.s2, &self.nu, v)
    }

    /// `Q'(v)` by the product rule.
    pub fn q_derivative(&self, v: f64) -> f64 {
        let p = self.p();
        let mut total = 0.0;
        for i in 0..p {
            for k in 0..p {
                if k == i {
                    continue;
                }
                let mut prod = self.nu[i] as f64;
                for l in 0..p {
                    if l != i && l != k {
                        prod *= v + self.s2[l];
                    }
                }
                total += prod;
            }
        }
        total
    }

    /// `Q'(−t_j²)` by the product rule over the stored offsets.
    pub fn q_derivative_at_root(&self, j: usize) -> f64 {
        let p = self.p();
        let mut total = 0.0;
        for i in 0..p {
            for k in 0..p {
                if k == i {
                    continue;
                }
                let mut prod = self.nu[i] as f64;
                for l in 0..p {
                    if l != i && l != k {
                        prod *= self.diff[l][j];
                    }
                }
                total += prod;
            }
        }
        total
    }

    /// `M(−t_j²) = Π_i (s_i² − t_j²)`.
    pub fn m_at_root(&self, j: usize) -> f64 {
        self.diff.iter().map(|row| row[j]).product()
    }

    /// `M(v) = Π_i (v + s_i²)`.
    pub fn m_eval(&self, v: f64) -> f64 {
        self.s2.iter().map(|s| v + s).product()
    }

    /// Group-mean covariance weights `ν_i / (τ² + s_i²)`.
    fn precision(&self, tau2: f64) -> impl Iterator<Item = f64> + '_ {
        self.nu.iter().zip(&self.s2).map(move |(&m, &s)| m as f64 / (tau2 + s))
    }
}

fn q_eval_product(s2: &[f64], nu: &[usize], v: f64) -> f64 {
    let p = s2.len();
    (0..p)
        .map(|i| {
            nu[i] as f64
                * (0..p).filter(|&k| k != i).map(|k| v + s2[k]).product::<f64>()
        })
        .sum()
}

/// Coefficients of `Q`, lowest degree first. Degree `p − 1`, leading coefficient `n`.
pub fn q_polynomial(grouped: &GroupedData) -> Result<Vec<f64>> {
    let p = grouped.p();
    if p < 2 {
        return Err(Error::Unsupported(format!("Q needs p >= 2, got p = {p}")));
    }
    let s2 = &grouped.group_variances;
    let mut q = vec![0.0; p];
    for i in 0..p {
        // Π_{k≠i} (v + s_k²)
        let mut poly = vec![1.0];
        for (k, &s) in s2.iter().enumerate() {
            if k == i {
                continue;
            }
            let mut next = vec![0.0; poly.len() + 1];
            for (d, c) in poly.iter().enumerate() {
                next[d] += c * s;
                next[d + 1] += c;
            }
            poly = next;
        }
        for (d, c) in poly.iter().enumerate() {
            q[d] += grouped.multiplicities[i] as f64 * c;
        }
    }
    Ok(q)
}

/// The roots `t_j²` of `Q(−t) = 0`, ascending, one per gap between adjacent `s_i²`.
pub fn find_roots(grouped: &GroupedData) -> Result<Vec<f64>> {
    if grouped.p() < 2 {
        return Err(Error::Unsupported(format!("need p >= 2, got p = {}", grouped.p())));
    }
    find_roots_with_offsets(&grouped.group_variances, &grouped.multiplicities).map(|(t, _)| t)
}

const ROOT_TOL: f64 = 4.0 * f64::EPSILON;

fn find_roots_with_offsets(s2: &[f64], nu: &[usize]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let p = s2.len();
    let mut t2 = Vec::with_capacity(p - 1);
    let mut diff = vec![vec![0.0; p - 1]; p];
    for j in 0..p - 1 {
        let gap = s2[j + 1] - s2[j];
        // secular function with poles on either side of the gap; `origin` is
        // the pole the root is measured from, `sign` +1 for the lower pole
        let secular = |origin: usize, sign: f64, delta: f64| -> f64 {
            (0..p)
                .map(|i| {
                    let d = if i == origin { -sign * delta } else { (s2[i] - s2[origin]) - sign * delta };
                    nu[i] as f64 / d
                })
                .sum::<f64>()
        };
        let mid = secular(j, 1.0, 0.5 * gap);
        let (origin, sign) = if mid >= 0.0 { (j, 1.0) } else { (j + 1, -1.0) };
        let half = 0.5 * gap;
        // as the offset grows from the origin pole the secular term moves
        // from -∞ (lower pole) or +∞ (upper pole) toward the midpoint value
        let delta = solve_bracketed(
            |d| secular(origin, sign, d),
            RootBracket::new(0.0, half, ROOT_TOL),
        )
        .map_err(|e| Error::NumericalFailure(format!("root {j} of Q not isolated: {e}")))?;
        if !(delta > 0.0) {
            return Err(Error::NumericalFailure(format!("root {j} of Q collapsed onto a pole")));
        }
        t2.push(s2[origin] + sign * delta);
        for i in 0..p {
            diff[i][j] = if i == origin { -sign * delta } else { (s2[i] - s2[origin]) - sign * delta };
        }
    }
    Ok((t2, diff))
}

fn a_matrix_from_offsets(nu: &[usize], diff: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let p = nu.len();
    let mut b = Vec::with_capacity(p - 1);
    for j in 0..p - 1 {
        let mut denom = 0.0;
        for i in 0..p {
            let d = diff[i][j];
            if d == 0.0 {
                return Err(Error::NumericalFailure(format!(
                    "root t_{j}² coincides with s_{i}²"
                )));
            }
            denom += nu[i] as f64 / (d * d);
        }
        b.push(1.0 / denom);
    }
    let a = (0..p)
        .map(|i| (0..p - 1).map(|j| nu[i] as f64 * b[j] / diff[i][j]).collect())
        .collect();
    Ok((a, b))
}

/// `A` and `b` for a grouped design: `A_ij = ν_i b_j / (s_i² − t_j²)` and
/// `b_j = −M(−t_j²)/Q'(−t_j²) = 1 / Σ_i ν_i (s_i² − t_j²)^{-2}`.
pub fn a_matrix(grouped: &GroupedData) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let d = Design::from_grouped(grouped)?;
    Ok((d.a, d.b))
}

/// Design plus data: the transformed variables `y_j` and the within-group variances.
#[derive(Debug, Clone)]
pub struct CanonicalForm {
    design: Design,
    grouped: GroupedData,
    y: Vec<f64>,
}

impl CanonicalForm {
    pub fn design(&self) -> &Design {
        &self.design
    }

    pub fn grouped(&self) -> &GroupedData {
        &self.grouped
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn u2(&self) -> &[f64] {
        &self.grouped.within_variances
    }

    pub fn t2(&self) -> &[f64] {
        self.design.t2()
    }

    pub fn b(&self) -> &[f64] {
        self.design.b()
    }

    pub fn a(&self) -> &[Vec<f64>] {
        self.design.a()
    }

    pub fn grand_mean(&self) -> f64 {
        self.grouped.grand_mean()
    }

    pub fn sufficient(&self) -> Sufficient<'_> {
        Sufficient { design: &self.design, y: &self.y, u2: &self.grouped.within_variances }
    }

    /// Inverse-variance weighted mean `x̃` at `τ²`, from the group means directly.
    pub fn weighted_mean(&self, tau2: f64) -> f64 {
        let w: Vec<f64> = self.design.precision(tau2).collect();
        let total: f64 = w.iter().sum();
        w.iter().zip(&self.grouped.group_means).map(|(w, x)| w * x).sum::<f64>() / total
    }

    /// `x̃` and `x̄` computed both from the weights and from `x̄ − Σ √b_j y_j / (τ² + t_j²)`.
    pub fn weighted_mean_decomposition(&self, tau2: f64) -> MeanDecomposition {
        let direct = self.weighted_mean(tau2);
        let grand_mean = self.grand_mean();
        let corrections: Vec<f64> = self
            .design
            .b
            .iter()
            .zip(&self.design.t2)
            .zip(&self.y)
            .map(|((b, t), y)| b.sqrt() * y / (tau2 + t))
            .collect();
        let representation = grand_mean - corrections.iter().sum::<f64>();
        MeanDecomposition { direct, representation, grand_mean, corrections }
    }

    /// Relative residual of `Σ ν_i (x_i − x̃)² / (τ² + s_i²) = Σ_j y_j² / (τ² + t_j²)`.
    pub fn quadratic_form_identity_check(&self, tau2: f64) -> f64 {
        let xt = self.weighted_mean(tau2);
        let lhs: f64 = self
            .design
            .precision(tau2)
            .zip(&self.grouped.group_means)
            .map(|(w, x)| w * (x - xt).powi(2))
            .sum();
        let rhs: f64 = self.y.iter().zip(&self.design.t2).map(|(y, t)| y * y / (tau2 + t)).sum();
        relative(lhs - rhs, lhs.abs().max(rhs.abs()))
    }
}

impl MeanDecomposition {
    /// Relative disagreement of the two routes, against the size of the terms involved.
    pub fn residual(&self) -> f64 {
        let scale = self.direct.abs().max(self.grand_mean.abs())
            + self.corrections.iter().map(|c| c.abs()).sum::<f64>();
        relative(self.direct - self.representation, scale)
    }
}

/// The two routes to `x̃` and the per-root correction terms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanDecomposition {
    pub direct: f64,
    pub representation: f64,
    pub grand_mean: f64,
    pub corrections: Vec<f64>,
}

/// Builds the canonical form of grouped data.
pub fn transform(grouped: &GroupedData) -> Result<CanonicalForm> {
    let design = Design::from_grouped(grouped)?;
    let y = contrasts(&design, &grouped.group_means);
    Ok(CanonicalForm { design, grouped: grouped.clone(), y })
}

/// `y_j = Σ_i A_ij x_i / √b_j`, referenced to `x_1` so a constant shift cancels exactly.
pub fn contrasts(design: &Design, group_means: &[f64]) -> Vec<f64> {
    let x0 = group_means[0];
    (0..design.p() - 1)
        .map(|j| {
            design.a.iter().zip(group_means).map(|(row, x)| row[j] * (x - x0)).sum::<f64>()
                / design.b[j].sqrt()
        })
        .collect()
}

/// Borrowed sufficient statistics `(y, u²)` over a design. Estimators and
/// weight rules only ever see this view, so the same code serves observed
/// data and Monte Carlo draws.
#[derive(Debug, Clone, Copy)]
pub struct Sufficient<'a> {
    pub design: &'a Design,
    pub y: &'a [f64],
    pub u2: &'a [f64],
}

impl<'a> Sufficient<'a> {
    pub fn new(design: &'a Design, y: &'a [f64], u2: &'a [f64]) -> Self {
        debug_assert_eq!(y.len(), design.p() - 1);
        debug_assert_eq!(u2.len(), design.p());
        Self { design, y, u2 }
    }

    pub fn n(&self) -> usize {
        self.design.n
    }

    pub fn p(&self) -> usize {
        self.design.p()
    }

    /// Iterator over `(ν_i − 1, s_i², u_i²)` for groups with replicates.
    pub fn replicated(&self) -> impl Iterator<Item = (f64, f64, f64)> + 'a {
        let d = self.design;
        d.nu.iter()
            .zip(&d.s2)
            .zip(self.u2)
            .filter(|((&m, _), _)| m > 1)
            .map(|((&m, &s), &u)| (m as f64 - 1.0, s, u))
    }

    /// `q∞ = Σ y_j² + Σ (ν_i − 1) u_i²`.
    pub fn q_infinity(&self) -> f64 {
        self.y.iter().map(|y| y * y).sum::<f64>()
            + self.replicated().map(|(m, _, u)| m * u).sum::<f64>()
    }

    /// `q⁰ = Σ y_j² / t_j² + Σ (ν_i − 1) u_i² / s_i²` (Cochran's statistic).
    pub fn q_zero(&self) -> f64 {
        self.y.iter().zip(&self.design.t2).map(|(y, t)| y * y / t).sum::<f64>()
            + self.replicated().map(|(m, s, u)| m * u / s).sum::<f64>()
    }
}

/// Residuals of the algebraic identities satisfied by `A`, `b` and `t²`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityReport {
    /// columns of `A` sum to zero
    pub column_sums: f64,
    /// `Σ_j A_ij = ν_i (s_i² − s²) / n`
    pub row_sums: f64,
    /// `AᵀJ⁻¹A = diag(b)`
    pub diagonal_ajta: f64,
    /// `AᵀSA = diag(b t²)` with `S = diag(s_i²/ν_i)`
    pub diagonal_asa: f64,
    /// `A (AᵀJ⁻¹A)⁻¹ Aᵀ = J − J e eᵀ J / n`
    pub projection: f64,
    /// `−M/Q' = Σ A²/ν = (1/t²) Σ s² A²/ν`
    pub b_three_way: f64,
    /// variance gap: `Σ b/(τ²+t²)` vs the direct variance difference and the polynomial ratio
    pub variance_gap: f64,
    /// diagonal-plus-rank-one form of `AᵀJ⁻¹C⁻¹J⁻¹A`
    pub rank_one: f64,
    /// normalized weights `ν_i/(τ²+s_i²) / Σ_k ν_k/(τ²+s_k²) = ν_i/n − Σ_j A_ij/(τ²+t_j²)`
    pub weight_expansion: f64,
    pub tau2: f64,
}

impl IdentityReport {
    pub fn max(&self) -> f64 {
        [
            self.column_sums,
            self.row_sums,
            self.diagonal_ajta,
            self.diagonal_asa,
            self.projection,
            self.b_three_way,
            self.variance_gap,
            self.rank_one,
            self.weight_expansion,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

fn relative(err: f64, scale: f64) -> f64 {
    if scale == 0.0 {
        err.abs()
    } else {
        err.abs() / scale
    }
}

/// Column-sum identity: `max_j |Σ_i A_ij| / ‖A_·j‖₁`.
pub fn column_sum_residual(d: &Design) -> f64 {
    (0..d.p() - 1)
        .map(|j| {
            let s: f64 = d.a.iter().map(|r| r[j]).sum();
            let norm: f64 = d.a.iter().map(|r| r[j].abs()).sum();
            relative(s, norm)
        })
        .fold(0.0, f64::max)
}

/// Row-sum identity `Σ_j A_ij = ν_i (s_i² − s²)/n`.
pub fn row_sum_residual(d: &Design) -> f64 {
    let n = d.n as f64;
    (0..d.p())
        .map(|i| {
            let s: f64 = d.a[i].iter().sum();
            let expected = d.nu[i] as f64 * (d.s2[i] - d.s2_mean) / n;
            let terms = d.nu[i] as f64 * (d.s2[i].abs() + d.s2_mean.abs()) / n;
            let scale = d.a[i].iter().map(|v| v.abs()).sum::<f64>().max(terms);
            relative(s - expected, scale)
        })
        .fold(0.0, f64::max)
}

/// `(AᵀJ⁻¹A, AᵀSA)` residuals against `diag(b)` and `diag(b t²)`.
pub fn diagonality_residuals(d: &Design) -> (f64, f64) {
    let m = d.p() - 1;
    let mut r1: f64 = 0.0;
    let mut r2: f64 = 0.0;
    for j in 0..m {
        for l in 0..m {
            let mut g1 = 0.0;
            let mut g2 = 0.0;
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for i in 0..d.p() {
                let nu = d.nu[i] as f64;
                let term = d.a[i][j] * d.a[i][l] / nu;
                g1 += term;
                g2 += term * d.s2[i];
                s1 += term.abs();
                s2 += (term * d.s2[i]).abs();
            }
            let (e1, e2) = if j == l { (d.b[j], d.b[j] * d.t2[j]) } else { (0.0, 0.0) };
            let scale1 = s1.max((d.b[j] * d.b[l]).sqrt());
            let scale2 = s2.max((d.b[j] * d.t2[j] * d.b[l] * d.t2[l]).sqrt());
            r1 = r1.max(relative(g1 - e1, scale1));
            r2 = r2.max(relative(g2 - e2, scale2));
        }
    }
    (r1, r2)
}

/// Projection identity, entrywise relative to `max ν_i`.
pub fn projection_residual(d: &Design) -> f64 {
    let n = d.n as f64;
    let scale = *d.nu.iter().max().unwrap() as f64;
    let mut r: f64 = 0.0;
    for i in 0..d.p() {
        for k in 0..d.p() {
            let lhs: f64 = (0..d.p() - 1).map(|j| d.a[i][j] * d.a[k][j] / d.b[j]).sum();
            let (ni, nk) = (d.nu[i] as f64, d.nu[k] as f64);
            let rhs = if i == k { ni } else { 0.0 } - ni * nk / n;
            r = r.max(relative(lhs - rhs, scale));
        }
    }
    r
}

/// Three expressions for each `b_j`, maximum pairwise relative disagreement.
pub fn b_three_way_residual(d: &Design) -> f64 {
    let mut r: f64 = 0.0;
    for j in 0..d.p() - 1 {
        let by_poly = -d.m_at_root(j) / d.q_derivative_at_root(j);
        let by_a: f64 = (0..d.p()).map(|i| d.a[i][j].powi(2) / d.nu[i] as f64).sum();
        let by_s: f64 = (0..d.p())
            .map(|i| d.s2[i] * d.a[i][j].powi(2) / d.nu[i] as f64)
            .sum::<f64>()
            / d.t2[j];
        for x in [by_poly, by_a, by_s] {
            r = r.max(relative(x - d.b[j], d.b[j]));
        }
    }
    r
}

/// Variance-gap identity: `Σ_j b_j/(τ²+t_j²)` against `(τ²+s²)/n − [Σ ν_i/(τ²+s_i²)]⁻¹`
/// and against the polynomial ratio `Σ ν_i (s² − s_i²) Π_{k≠i}(τ²+s_k²) / (n Q(τ²))`.
pub fn variance_gap_residual(d: &Design, tau2: f64) -> f64 {
    let gap = d.variance_gap(tau2);
    let n = d.n as f64;
    let direct = (tau2 + d.s2_mean) / n - 1.0 / d.precision(tau2).sum::<f64>();
    let p = d.p();
    let terms: Vec<f64> = (0..p)
        .map(|i| {
            d.nu[i] as f64
                * (d.s2_mean - d.s2[i])
                * (0..p).filter(|&k| k != i).map(|k| tau2 + d.s2[k]).product::<f64>()
        })
        .collect();
    let nq = n * d.q_eval(tau2);
    let poly = terms.iter().sum::<f64>() / nq;
    // both reference forms cancel; measure their error against the size of what cancels
    let direct_scale = gap.max((tau2 + d.s2_mean) / n);
    let poly_scale = gap.max(
        terms
            .iter()
            .zip(&d.s2)
            .map(|(t, s)| t.abs() * (d.s2_mean.abs() + s.abs()) / (d.s2_mean - s).abs().max(f64::MIN_POSITIVE))
            .sum::<f64>()
            / nq.abs(),
    );
    relative(gap - direct, direct_scale).max(relative(gap - poly, poly_scale))
}

/// Variance gap evaluated three ways: `(Σ b/(τ²+t²), direct difference, polynomial ratio)`.
pub fn variance_gap(d: &Design, tau2: f64) -> (f64, f64, f64) {
    let n = d.n as f64;
    let p = d.p();
    let direct = (tau2 + d.s2_mean) / n - 1.0 / d.precision(tau2).sum::<f64>();
    let numer: f64 = (0..p)
        .map(|i| {
            d.nu[i] as f64
                * (d.s2_mean - d.s2[i])
                * (0..p).filter(|&k| k != i).map(|k| tau2 + d.s2[k]).product::<f64>()
        })
        .sum();
    (d.variance_gap(tau2), direct, numer / (n * d.q_eval(tau2)))
}

/// Diagonal-plus-rank-one identity for `AᵀJ⁻¹C⁻¹J⁻¹A` with `C = τ²J⁻¹ + S`.
pub fn rank_one_residual(d: &Design, tau2: f64) -> f64 {
    let m = d.p() - 1;
    let total_precision: f64 = d.precision(tau2).sum();
    let bh: Vec<f64> = (0..m).map(|j| d.b[j] / (tau2 + d.t2[j])).collect();
    let mut r: f64 = 0.0;
    for j in 0..m {
        for l in 0..m {
            let mut lhs = 0.0;
            let mut scale = 0.0;
            for i in 0..d.p() {
                let term = d.a[i][j] * d.a[i][l] / (d.nu[i] as f64 * (tau2 + d.s2[i]));
                lhs += term;
                scale += term.abs();
            }
            let rhs = if j == l { bh[j] } else { 0.0 } + total_precision * bh[j] * bh[l];
            r = r.max(relative(lhs - rhs, scale.max(rhs.abs())));
        }
    }
    r
}

/// Partial-fraction expansion of the normalized inverse-variance weights.
pub fn weight_expansion_residual(d: &Design, tau2: f64) -> f64 {
    let n = d.n as f64;
    let total: f64 = d.precision(tau2).sum();
    d.precision(tau2)
        .enumerate()
        .map(|(i, w)| {
            let lhs = w / total;
            let mut rhs = d.nu[i] as f64 / n;
            let mut scale = rhs;
            for j in 0..d.p() - 1 {
                let term = d.a[i][j] / (tau2 + d.t2[j]);
                rhs -= term;
                scale += term.abs();
            }
            relative(lhs - rhs, scale)
        })
        .fold(0.0, f64::max)
}

/// All design identities at a given `τ²`.
pub fn identity_report(d: &Design, tau2: f64) -> IdentityReport {
    let (diagonal_ajta, diagonal_asa) = diagonality_residuals(d);
    IdentityReport {
        column_sums: column_sum_residual(d),
        row_sums: row_sum_residual(d),
        diagonal_ajta,
        diagonal_asa,
        projection: projection_residual(d),
        b_three_way: b_three_way_residual(d),
        variance_gap: variance_gap_residual(d, tau2),
        rank_one: rank_one_residual(d, tau2),
        weight_expansion: weight_expansion_residual(d, tau2),
        tau2,
    }
}
