//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A mask with no foreground pixels where at least one is required.
    #[error("empty mask: {0}")]
    EmptyMask(String),
    /// Configuration invariant violations, one message per offending field.
    #[error("invalid config: {0:?}")]
    Config(Vec<String>),
    /// Synthetic generation could not place an instance within bounded retries.
    #[error("generation failed: {0}")]
    Generation(String),
    /// An image or patch size constraint was violated.
    #[error("size error: {0}")]
    Size(String),
    /// A batch that must be nonempty was empty.
    #[error("empty batch: {0}")]
    EmptyBatch(String),
    /// Guarded annotations were read from a trainer context.
    #[error("annotation guard: {0}")]
    Guard(String),
    /// A loss term or parameter became non-finite.
    #[error("numerical error in {term}: {detail}")]
    Numerical { term: String, detail: String },
    /// A frozen parameter group changed during stage-2 training.
    #[error("freeze violation: {0}")]
    FreezeViolation(String),
    /// Pseudo-label generation retained nothing at the configured threshold.
    #[error("no pseudo-labels: {0}")]
    EmptyPseudoLabel(String),
    /// Pseudo-labels and images disagree on ids or coverage.
    #[error("consistency error: {0}")]
    Consistency(String),
    /// Two masks that must share a grid have different shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A metric was called outside the regime where it is defined.
    #[error("mode error: {0}")]
    Mode(String),
    /// On-disk formats: manifests, label images, checkpoints, reports.
    #[error("format error: {0}")]
    Format(String),
    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn numerical(term: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical {
            term: term.into(),
            detail: detail.into(),
        }
    }
}
