use thiserror::Error;

pub type Result<T> = std::result::Result<T, GeeError>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GeeError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid cluster {participant}: {reason}")]
    InvalidCluster { participant: String, reason: String },

    #[error("row {row}: frequency index {freq} outside 1..={levels}")]
    UnknownFrequency {
        row: usize,
        freq: usize,
        levels: usize,
    },

    #[error("participant {participant}: no measurement for ear {ear} at frequency {freq}")]
    MissingEar {
        participant: String,
        ear: usize,
        freq: usize,
    },

    #[error("working correlation {spec} is not positive semi-definite (minimum eigenvalue {min_eigenvalue:.3e})")]
    NotPositiveSemidefinite { spec: String, min_eigenvalue: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("information matrix is singular; near-collinear columns: {}", columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("matrix is singular: {0}")]
    Singular(String),

    #[error("non-positive variance at cluster {cluster}, row {row}")]
    NonPositiveVariance { cluster: usize, row: usize },

    #[error("correlation parameters did not converge after {iterations} iterations (residual norm {residual_norm:.3e})")]
    AlphaNotConverged {
        iterations: usize,
        residual_norm: f64,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
