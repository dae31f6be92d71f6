use thiserror::Error;

/// Errors produced anywhere in the pruning pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("degenerate layer {0}: all singular values are zero")]
    DegenerateLayer(String),
    #[error("unsupported structure: {0}")]
    UnsupportedStructure(String),
    #[error("reconstruction of layer {layer} diverged: loss {loss:.6e} exceeded 10x the initial {initial:.6e}")]
    Divergence { layer: String, loss: f64, initial: f64 },
    #[error("internal invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn format_err(offset: u64, msg: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: msg.into(),
    }
}
