use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {id}: cannot load {path}: {reason}")]
    ImageLoad { id: String, path: PathBuf, reason: String },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("unsupported {what} version {found} (expected {expected})")]
    Version { what: &'static str, found: u32, expected: u32 },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("invalid box [{x_min}, {y_min}, {x_max}, {y_max}]: {reason}")]
    InvalidBox { x_min: f64, y_min: f64, x_max: f64, y_max: f64, reason: &'static str },

    #[error("cannot split {n} items: every split needs at least one item (n >= 3)")]
    SplitTooSmall { n: usize },

    #[error("split fractions must sum to 1 (got {0})")]
    SplitFractions(f64),

    #[error("no training boxes on the {side} side; configure a default ROI for that side instead")]
    EmptyRoiSide { side: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("raster {width}x{height} is smaller than the feature stride {stride}")]
    RasterTooSmall { width: usize, height: usize, stride: usize },

    #[error("box decode produced non-finite size (deltas {0:?})")]
    NonFiniteDecode([f64; 4]),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("statistics: {0}")]
    Stats(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json { context: context.into(), source }
    }

    /// Short stable identifier, used for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::ImageLoad { .. } => "image_load",
            Error::Json { .. } => "json",
            Error::Version { .. } => "version_mismatch",
            Error::Validation(_) => "validation",
            Error::InvalidBox { .. } => "invalid_box",
            Error::SplitTooSmall { .. } => "split_too_small",
            Error::SplitFractions(_) => "split_fractions",
            Error::EmptyRoiSide { .. } => "empty_roi_side",
            Error::Config(_) => "config",
            Error::RasterTooSmall { .. } => "raster_too_small",
            Error::NonFiniteDecode(_) => "non_finite_decode",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Checkpoint(_) => "checkpoint",
            Error::Stats(_) => "stats",
        }
    }
}
