use thiserror::Error;

/// Errors raised by model construction, propagation and optimization.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A closed-form or asymptotic expression was evaluated outside the region
    /// where it is defined.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("integration failure: {message} (try a smaller step than dt = {dt})")]
    Integration { message: String, dt: f64 },

    #[error("positivity violation: {0}")]
    Positivity(String),

    #[error(transparent)]
    Linalg(#[from] ndarray_linalg::error::LinalgError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
