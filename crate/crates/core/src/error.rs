use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller passed arguments that do not fit together (dimensions, empty inputs).
    #[error("usage error: {0}")]
    Usage(String),

    /// Invalid experiment, distribution or schedule parameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// Simulator state disagrees with the schedule it is driven by.
    #[error("internal error: {0}")]
    Internal(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn internal(msg: impl Into<String>) -> Error {
    Error::Internal(msg.into())
}
