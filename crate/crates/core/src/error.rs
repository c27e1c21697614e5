use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("design error: {0}")]
    Design(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("optimizer did not converge after {iterations} iterations (gradient norm {gradient_norm:.3e})")]
    Convergence { iterations: usize, gradient_norm: f64 },

    #[error("separation detected: {0}")]
    Separation(String),

    #[error("degenerate arm: {0}")]
    DegenerateArm(String),

    #[error("no incentivized-recruited individuals: nu = {nu:.6} is within {guard} of 1")]
    NoIncentivized { nu: f64, guard: f64 },

    #[error("numerical degeneracy: {0}")]
    NumericalDegeneracy(String),

    #[error("bootstrap unreliable: {failed} of {total} replicates failed")]
    BootstrapUnreliable { failed: usize, total: usize },

    #[error("generation error: {0}")]
    Generation(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, Error>;
