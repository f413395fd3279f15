//! Shared numerical kernels.

pub mod gamma;
pub mod quad;
pub mod rng;
pub mod roots;

pub use gamma::{chi2_cdf, chi2_pdf, chi2_sf, gamma_p, gamma_q, ln_gamma};
pub use quad::{integrate, integrate_to_infinity, log_sum_exp};
pub use rng::RngStream;
pub use roots::{solve_bracketed, RootBracket};
