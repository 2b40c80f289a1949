//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the library.
///
/// The CLI maps these onto process exit codes: `Config` -> 2, `Io` -> 3,
/// `Numeric` -> 4, anything else -> 1.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or matrix shapes are incompatible for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An API contract was violated (e.g. backward on a non-scalar loss).
    #[error("contract error: {0}")]
    Contract(String),

    /// A parameter is outside its mathematical domain (e.g. temperature <= 0).
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration value is invalid or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A computation produced NaN/Inf or otherwise left the numeric domain.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A physics simulation left the valid state space.
    #[error("simulation error: {0}")]
    Simulation(String),

    /// An agent embedding degenerated (zero norm) so affinities are undefined.
    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    /// A checkpoint could not be read or does not match the model.
    #[error("checkpoint load error: {0}")]
    Load(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
