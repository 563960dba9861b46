//! Crate-wide error type.

/// Errors reported by graph construction, losses, the objective, the privacy
/// accountant and the solver.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("agent index {index} out of range for {n} agents")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("graph is disconnected: {0}")]
    Disconnected(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("did not converge: gradient norm {grad_norm:e} after {iters} iterations")]
    NoConvergence { grad_norm: f64, iters: usize },

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
