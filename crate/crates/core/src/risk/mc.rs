//! Deterministic parallel Monte Carlo.
//!
//! Work is split into chunks of [`CHUNK`] draws. Chunk `c` of evaluation point
//! `p` always reads RNG stream `(p << 32) | c`, and per-chunk accumulators are
//! merged in chunk order, so results depend only on `(seed, n_samples)` and not
//! on how many workers ran them.

use rayon::prelude::*;

use crate::canonical::Design;
use crate::error::Result;
use crate::numerics::RngStream;

pub const CHUNK: usize = 8192;

/// Running mean and sum of squared deviations.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Welford {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Welford {
    #[inline]
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Welford) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let d = other.mean - self.mean;
        self.mean += d * other.count as f64 / n;
        self.m2 += other.m2 + d * d * self.count as f64 * other.count as f64 / n;
        self.count += other.count;
    }

    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    /// Standard error of the mean.
    pub fn std_error(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }
}

/// Runs `kernel(rng, draws, acc)` over all chunks of all points and returns,
/// per point, `k` merged accumulators.
pub fn run<F>(points: usize, n_samples: usize, k: usize, seed: u64, kernel: F) -> Result<Vec<Vec<Welford>>>
where
    F: Fn(usize, &mut RngStream, usize, &mut [Welford]) -> Result<()> + Sync,
{
    let chunks = n_samples.div_ceil(CHUNK);
    let tasks: Vec<(usize, usize)> =
        (0..points).flat_map(|p| (0..chunks).map(move |c| (p, c))).collect();
    let partial: Vec<Result<Vec<Welford>>> = tasks
        .par_iter()
        .map(|&(p, c)| {
            let mut rng = RngStream::new(seed, RngStream::stream_id(p as u32, c as u32));
            let draws = CHUNK.min(n_samples - c * CHUNK);
            let mut acc = vec![Welford::default(); k];
            kernel(p, &mut rng, draws, &mut acc)?;
            Ok(acc)
        })
        .collect();
    let mut out = vec![vec![Welford::default(); k]; points];
    for ((p, _), acc) in tasks.iter().zip(partial) {
        let acc = acc?;
        for (o, a) in out[*p].iter_mut().zip(&acc) {
            o.merge(a);
        }
    }
    Ok(out)
}

/// Draws `y_j ~ N(0, τ² + t_j²)` and `u_i² ~ (τ² + s_i²) χ²_{ν_i−1}/(ν_i − 1)`.
pub fn draw_sufficient(design: &Design, tau2: f64, rng: &mut RngStream, y: &mut [f64], u2: &mut [f64]) {
    for (yj, t) in y.iter_mut().zip(design.t2()) {
        *yj = (tau2 + t).sqrt() * rng.normal();
    }
    for ((u, s), &m) in u2.iter_mut().zip(design.group_variances()).zip(design.multiplicities()) {
        *u = if m > 1 {
            let df = (m - 1) as u32;
            (tau2 + s) * rng.chi2(df) / df as f64
        } else {
            0.0
        };
    }
}

/// Draws group means `x_i ~ N(0, (τ² + s_i²)/ν_i)` and within-group variances.
pub fn draw_grouped(design: &Design, tau2: f64, rng: &mut RngStream, x: &mut [f64], u2: &mut [f64]) {
    for ((xi, s), &m) in x.iter_mut().zip(design.group_variances()).zip(design.multiplicities()) {
        *xi = ((tau2 + s) / m as f64).sqrt() * rng.normal();
    }
    for ((u, s), &m) in u2.iter_mut().zip(design.group_variances()).zip(design.multiplicities()) {
        *u = if m > 1 {
            let df = (m - 1) as u32;
            (tau2 + s) * rng.chi2(df) / df as f64
        } else {
            0.0
        };
    }
}
