use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("size mismatch: expected {expected} payload bytes, found {found}")]
    SizeMismatch { expected: usize, found: usize },

    #[error("crown boundary {boundary} out of range for depth {depth}")]
    BoundaryOutOfRange { boundary: usize, depth: usize },

    #[error("slice index {z} out of range for depth {depth}")]
    SliceOutOfRange { z: usize, depth: usize },

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("centerline fit needs at least 2 points, got {0}")]
    TooFewPoints(usize),

    #[error("degenerate centerline fit: all points share z = {0}")]
    DegenerateFit(f64),

    #[error("expected a {expected} track, got {found}")]
    WrongRegion { expected: String, found: String },

    #[error("keypoint ({x}, {y}) outside {width}x{height} image")]
    KeypointOutOfBounds { x: f64, y: f64, width: usize, height: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("backward called without a recorded forward cache")]
    MissingCache,

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("patient id mismatch: {0}")]
    IdMismatch(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
