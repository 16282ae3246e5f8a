use thiserror::Error;

/// Errors surfaced by the segmentation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("invalid phantom spec: {0}")]
    Spec(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("prompt {coord:?} lies outside the {dims:?} grid")]
    PromptBounds { coord: [i64; 3], dims: [usize; 3] },
    #[error("ground truth has no foreground voxels")]
    NoForeground,
    #[error("prompt budget of {budget} steps exhausted")]
    BudgetExceeded { budget: usize },
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("metadata error: {0}")]
    Metadata(String),
    #[error("missing table cell: {0}")]
    Gap(String),
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at step {step}: {snapshot}")]
    NanLoss { step: usize, snapshot: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
