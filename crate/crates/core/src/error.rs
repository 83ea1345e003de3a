use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mesh: {0}")]
    Mesh(String),

    #[error("triangle {0} is degenerate (non-positive area)")]
    DegenerateTriangle(usize),

    #[error("matrix is not positive definite: pivot {pivot} = {value:e}")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("matrix is singular at pivot {0}")]
    Singular(usize),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("eigensolver did not converge after {iterations} steps (worst residual {worst:e})")]
    NoConvergence {
        iterations: usize,
        worst: f64,
        residuals: Vec<f64>,
    },

    #[error("conjugate gradients stalled after {iterations} iterations (relative residual {residual:e})")]
    CgStalled { iterations: usize, residual: f64 },

    #[error("dimension {n} exceeds the dense guard ({limit})")]
    TooLarge { n: usize, limit: usize },

    #[error("cache i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension { expected, got });
    }
    Ok(())
}
