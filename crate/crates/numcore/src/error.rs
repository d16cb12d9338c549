use thiserror::Error;

/// Errors raised by tensor construction and graph operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid argument to {op}: {detail}")]
    Invalid { op: &'static str, detail: String },
}

impl NumError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        NumError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        NumError::Invalid {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, NumError>;
