use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Input is well formed but outside what the operation supports (e.g. p < 2).
    #[error("unsupported input: {0}")]
    Unsupported(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("no convergence after {iterations} iterations (last iterate {last})")]
    NonConvergence { iterations: usize, last: f64 },

    #[error("rule `{rule}` requires n > 3, got n = {n}")]
    InvalidForN { rule: String, n: usize },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
