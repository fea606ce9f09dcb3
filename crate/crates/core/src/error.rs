use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("cycle graph needs at least 3 nodes, got {0}")]
    TooFewNodes(usize),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix is not Hermitian (max deviation {0:e})")]
    NotHermitian(f64),

    #[error("invalid adjacency matrix: {0}")]
    InvalidAdjacency(String),

    #[error("index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },

    #[error("degenerate measurement: norm collapsed to {norm:e}")]
    DegenerateMeasurement { norm: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("Hermitian eigendecomposition did not converge")]
    Eigensolver,

    #[error("digital enumeration needs {count} combinations, cap is {cap}")]
    TooManyCombinations { count: u128, cap: u128 },

    #[error("trajectory {index} (master seed {master_seed}) aborted at step {step}: {reason}")]
    TrajectoryAborted {
        master_seed: u64,
        index: u64,
        step: usize,
        reason: String,
    },

    #[error("{aborted} of {total} trajectories aborted, more than 1%")]
    TooManyAborts { aborted: usize, total: usize },
}
