use thiserror::Error;

#[derive(Debug, Error)]
pub enum CclError {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch in {op}: expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("batch integrity: {0}")]
    BatchIntegrity(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CclError> = std::result::Result<T, E>;

pub(crate) fn param_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CclError::Parameter(msg.into()))
}

pub(crate) fn shape_err<T>(
    op: &'static str,
    expected: impl std::fmt::Display,
    actual: impl std::fmt::Display,
) -> Result<T> {
    Err(CclError::Shape {
        op,
        expected: expected.to_string(),
        actual: actual.to_string(),
    })
}
