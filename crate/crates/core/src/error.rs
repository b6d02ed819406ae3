use std::path::PathBuf;

/// Errors produced across the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid argument, shape, or dimension.
    #[error("parameter error: {0}")]
    Param(String),

    /// Point at or behind a perspective camera plane.
    #[error("projection error: {0}")]
    Projection(String),

    /// Malformed container or file contents.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Mesh does not satisfy a required topological property.
    #[error("mesh error: {0}")]
    Mesh(String),

    /// Degenerate geometry, e.g. collinear point sets for registration.
    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(PathBuf),

    #[error("image error: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn param_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Param(msg.into()))
}
