//! Reproducible random streams for Monte Carlo work.
//!
//! Every stream is ChaCha8 keyed by `seed` with the 64-bit ChaCha stream
//! word set to `stream_id`; the cipher is counter based, so a stream's output
//! depends only on `(seed, stream_id)` and never on which worker consumes it.
//! Normals come from the `rand_distr` ziggurat; chi-square variates with at
//! most [`SUM_OF_SQUARES_MAX_DF`] degrees of freedom are sums of squared
//! normals, larger ones use the gamma sampler. All arithmetic is IEEE f64
//! with no platform intrinsics, so outputs are bit-stable across targets that
//! share the same `libm` for `ln`/`exp`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

pub const SUM_OF_SQUARES_MAX_DF: u32 = 16;

pub struct RngStream {
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self { rng }
    }

    /// Stream id for chunk `chunk` of evaluation point `point`.
    pub fn stream_id(point: u32, chunk: u32) -> u64 {
        ((point as u64) << 32) | chunk as u64
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// A chi-square variate with `df` degrees of freedom (0 for `df == 0`).
    pub fn chi2(&mut self, df: u32) -> f64 {
        match df {
            0 => 0.0,
            d if d <= SUM_OF_SQUARES_MAX_DF => (0..d)
                .map(|_| {
                    let z = self.normal();
                    z * z
                })
                .sum(),
            d => Gamma::new(0.5 * d as f64, 2.0)
                .expect("positive shape")
                .sample(&mut self.rng),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_and_stream_repeat() {
        let mut a = RngStream::new(42, 7);
        let mut b = RngStream::new(42, 7);
        for _ in 0..1000 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }

    #[test]
    fn streams_are_uncorrelated() {
        let n = 200_000;
        let mut a = RngStream::new(1, 0);
        let mut b = RngStream::new(1, 1);
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let (x, y) = (a.normal(), b.normal());
            sab += x * y;
            saa += x * x;
            sbb += y * y;
        }
        let corr = sab / (saa * sbb).sqrt();
        assert!(corr.abs() < 4.0 / (n as f64).sqrt(), "corr = {corr}");
    }

    #[test]
    fn chi2_means() {
        let n = 1_000_000;
        for &df in &[1u32, 3, 16, 17, 40] {
            let mut r = RngStream::new(9, df as u64);
            let mut s = 0.0;
            for _ in 0..n {
                s += r.chi2(df);
            }
            let mean = s / n as f64;
            // sd of chi2_df is sqrt(2 df)
            let se = (2.0 * df as f64 / n as f64).sqrt();
            assert!((mean - df as f64).abs() < 4.0 * se, "df {df}: mean {mean}");
        }
    }
}
