//! Crate-wide error type.
//!
//! Errors fall into four classes: `Domain` for arguments outside an
//! operation's documented range, `State` for calls that are illegal in the
//! current object state (for example stepping a finished episode), `Config`
//! for invalid or inconsistent configuration, and `Input` for malformed
//! external data such as result CSVs or checkpoint files. I/O and
//! serialization failures are wrapped so they propagate with context.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument was outside the operation's valid range.
    #[error("domain error: {0}")]
    Domain(String),

    /// The operation is not legal in the object's current state.
    #[error("state error: {0}")]
    State(String),

    /// Configuration is invalid or internally inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// External input data (CSV, JSON, JSONL) is malformed.
    #[error("input error: {0}")]
    Input(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_carries_class_and_message() {
        let e = Error::domain("err_rate must lie in [0, 1)");
        assert_eq!(e.to_string(), "domain error: err_rate must lie in [0, 1)");
        let e = Error::config("horizon_min must not exceed horizon_max");
        assert!(e.to_string().starts_with("config error:"));
    }

    #[test]
    fn io_errors_convert() {
        let io = std::io::Error::new(std::io::ErrorKind::NotFound, "missing");
        let e: Error = io.into();
        assert!(matches!(e, Error::Io(_)), "io errors must map to Error::Io");
    }
}
