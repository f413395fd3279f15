//! Random-effects meta-analysis under unequal reported variances.
//!
//! The crate maps grouped study data to a canonical set of independent
//! contrasts, estimates the between-study variance `τ²`, forms weighted or
//! shrinkage estimators of the common mean, and evaluates their risk relative
//! to the inverse-variance weighted mean with known `τ²`.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod canonical;
pub mod cli;
pub mod error;
pub mod model;
pub mod mu;
pub mod numerics;
pub mod risk;
pub mod tau;

pub use canonical::{transform, CanonicalForm, Design, Sufficient};
pub use error::{Error, Result};
pub use model::{group, GroupedData, Study, StudySet};
