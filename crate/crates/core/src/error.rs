use thiserror::Error;

use crate::geometry::IdentifiabilityReason;

/// Errors produced by the fusion library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("model is not identifiable: {0}")]
    Unidentifiable(IdentifiabilityReason),

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{0} is not symmetric positive definite")]
    NotPositiveDefinite(&'static str),

    #[error("Gauss-Newton normal matrix is singular")]
    SingularNormalMatrix,

    #[error("every gyroscope channel is saturated on axes {0:?}")]
    AxisFullySaturated([bool; 3]),

    #[error("tensor method needs rank-4 position matrix, got rank {0}")]
    TensorRankDeficient(usize),

    #[error("Fisher information is singular; the Cramér-Rao bound is unbounded")]
    UnboundedCrb,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
