use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("scene generation failed for seed {seed}: {reason}")]
    Placement { seed: u64, reason: String },

    #[error("annotation error: {0}")]
    Annotation(String),

    #[error("malformed raster file {path}: {reason}")]
    RasterFormat { path: PathBuf, reason: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite {term} loss at scene {scene}, step {step}, instance {instance}")]
    NonFinite {
        scene: usize,
        step: usize,
        instance: usize,
        term: &'static str,
    },

    #[error("gradient check failed for: {0}")]
    GradCheckFailed(String),

    #[error("forward cache missing; run forward with caching before backward")]
    MissingCache,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable snake_case name of the variant, for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Config(_) => "config",
            Error::Placement { .. } => "placement",
            Error::Annotation(_) => "annotation",
            Error::RasterFormat { .. } => "raster_format",
            Error::Checkpoint(_) => "checkpoint",
            Error::NonFinite { .. } => "non_finite",
            Error::GradCheckFailed(_) => "gradcheck_failed",
            Error::MissingCache => "missing_cache",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }

    /// Numeric failures (diverged losses, wrong gradients) as opposed to bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::GradCheckFailed(_))
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
