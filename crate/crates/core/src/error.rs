use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("image too small: {height}x{width} (minimum is 4x4)")]
    ImageTooSmall { height: usize, width: usize },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid markers: {0}")]
    InvalidMarkers(String),
    #[error("degenerate polygon: markers enclose zero area")]
    DegeneratePolygon,
    #[error("empty region: {0}")]
    EmptyRegion(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(what: impl Into<String>) -> Error {
    Error::ShapeMismatch(what.into())
}
