//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HartError {
    /// Tensor extents do not line up for the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A parameter is outside its valid range.
    #[error("invalid argument `{what}`: {detail}")]
    InvalidArgument { what: &'static str, detail: String },

    /// Autodiff tape misuse (non-scalar loss, detached loss, double backward).
    #[error("autodiff: {0}")]
    Tape(String),

    /// Run configuration problems (parse errors, unknown keys, out-of-range values).
    #[error("config: {0}")]
    Config(String),

    /// Malformed external data (PPM, checkpoint container, manifest).
    #[error("format error in {what}: {detail}")]
    Format { what: &'static str, detail: String },

    /// A caller broke an API contract (e.g. KV cache fed out of order).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl HartError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        HartError::ShapeMismatch { op, detail: detail.into() }
    }

    pub fn arg(what: &'static str, detail: impl Into<String>) -> Self {
        HartError::InvalidArgument { what, detail: detail.into() }
    }

    pub fn format(what: &'static str, detail: impl Into<String>) -> Self {
        HartError::Format { what, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, HartError>;
