use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: String, right: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("class {class} has a zero pre-consumption benchmark")]
    ZeroBenchmark { class: usize },

    #[error("pixel totals differ: predicted {pred} vs ground truth {gt}")]
    AreaMismatch { pred: u64, gt: u64 },

    #[error("no defined classes left to aggregate")]
    NoDefinedClasses,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("parse error in {source_name} at {location}: {message}")]
    Parse {
        source_name: String,
        location: String,
        message: String,
    },

    #[error("missing files: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingFile(Vec<PathBuf>),

    #[error("unsupported mask format: {0}")]
    Format(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: u8, num_classes: usize },

    #[error("too few entries: {0}")]
    TooFewEntries(String),

    #[error("infeasible synthetic spec: {0}")]
    InfeasibleSpec(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("split {0} is empty")]
    EmptySplit(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
