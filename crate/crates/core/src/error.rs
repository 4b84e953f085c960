use std::path::PathBuf;

/// Errors produced anywhere in the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid tensor shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("convolution kernel size must be odd, got {0}")]
    EvenKernel(usize),

    #[error("batch-norm running statistics are not initialized; train the model before evaluating")]
    UninitializedRunningStats,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u8, classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("image extents {found:?} do not match the model's expected {expected:?}")]
    ExtentMismatch {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },

    #[error(
        "extent mismatch between {} ({image_size:?}) and {} ({label_size:?})",
        image.display(),
        labels.display()
    )]
    FileExtentMismatch {
        image: PathBuf,
        image_size: (usize, usize),
        labels: PathBuf,
        label_size: (usize, usize),
    },

    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite loss on image {0}")]
    NonFiniteLoss(String),

    #[error("forward tape is incomplete: {0}")]
    IncompleteTape(String),

    #[error("confusion matrix is empty")]
    EmptyConfusion,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
