use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("layer {layer} out of range (backend has {count} layers)")]
    LayerOutOfRange { layer: usize, count: usize },

    #[error("backend `{adapter}` unavailable: {reason}")]
    BackendUnavailable { adapter: String, reason: String },

    #[error("backend failure: {0}")]
    Backend(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("mask is empty on the {height}x{width} embedding grid")]
    EmptyMask { height: usize, width: usize },

    #[error("sample too small: need at least {needed} values, got {got}")]
    SampleTooSmall { needed: usize, got: usize },

    #[error("need at least 4 correspondences, got {0}")]
    TooFewMatches(usize),

    #[error("registration failed: {inliers} consensus matches, {required} required")]
    RegistrationFailed { inliers: usize, required: usize },

    #[error("transform is not invertible (det = {0:e})")]
    NotInvertible(f64),

    #[error("dataset layout error: {0}")]
    Layout(String),

    #[error("unpaired ids: {}", .0.join(", "))]
    Pairing(Vec<String>),

    #[error("missing predictions for ids: {}", .0.join(", "))]
    MissingPredictions(Vec<String>),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    ImageIo {
        path: PathBuf,
        #[source]
        source: ::image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the caller's inputs (bad paths, layouts,
    /// parameters) rather than by an internal failure.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::Backend(_) | Error::BackendUnavailable { .. })
    }
}
