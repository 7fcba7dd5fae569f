use thiserror::Error;

/// Errors raised by constructors, operators and flows.
#[derive(Debug, Error)]
pub enum FlowError {
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("matrix is not positive semidefinite (min eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("singular matrix: {0}")]
    Singular(&'static str),
    #[error("operators do not commute (normalized commutator {0:e}); outside the commuting regime")]
    NonCommuting(f64),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, FlowError>;

pub(crate) fn invalid(msg: impl Into<String>) -> FlowError {
    FlowError::InvalidParameter(msg.into())
}

pub(crate) fn dim_mismatch(msg: impl Into<String>) -> FlowError {
    FlowError::Dimension(msg.into())
}
