use thiserror::Error;

/// Errors raised by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid parameters or inconsistent shapes supplied by the caller.
    #[error("configuration error: {0}")]
    Config(String),

    /// A violated precondition of the federated protocol (empty cohort, wrong strategy state).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A NaN or infinity appeared during a computation.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
