use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum QpiError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("infinite coherence length: zero angular and spectral width")]
    InfiniteCoherence,

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("aliasing error: carrier ({fx}, {fy}) cycles/px is not below Nyquist")]
    Aliasing { fx: f64, fy: f64 },

    #[error("placement error: {0}")]
    Placement(String),

    #[error("order overlap: filter circle at ({row}, {col}) radius {radius} reaches the DC bin")]
    OrderOverlap { row: i64, col: i64, radius: f64 },

    #[error("filter bounds error: {0}")]
    FilterBounds(String),

    #[error("degenerate complex field: all samples are zero")]
    DegenerateField,

    #[error("contract error: {0}")]
    Contract(String),

    #[error("insufficient data: class {class} has {available} entries, {required} required")]
    InsufficientData {
        class: String,
        available: usize,
        required: usize,
    },

    #[error("split error: {0}")]
    Split(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric fault in {layer}: {detail}")]
    NumericFault { layer: String, detail: String },

    #[error("state error: {0}")]
    State(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("undefined rate: {0}")]
    UndefinedRate(String),

    #[error("degenerate ROC: only one class present")]
    DegenerateRoc,

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<QpiError>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, QpiError>;

impl QpiError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        QpiError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        QpiError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
