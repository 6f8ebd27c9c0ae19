//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("bad IDX magic number in {path}: expected {expected:#010x}, found {found:#010x}")]
    IdxBadMagic {
        path: String,
        expected: u32,
        found: u32,
    },

    #[error(
        "IDX payload size mismatch in {path}: header promises {expected} bytes, file holds {found}"
    )]
    IdxPayloadMismatch {
        path: String,
        expected: usize,
        found: usize,
    },

    #[error("IDX image/label count mismatch: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("network shape error: {0}")]
    ShapeMismatch(String),

    #[error("forward cache does not match this backward call: {0}")]
    StaleCache(String),

    #[error("gradient check requires a network with 1..=10000 parameters, got {0}")]
    GradCheckSize(usize),

    #[error("labels required but absent on dataset '{0}'")]
    MissingLabels(String),

    #[error("empty constraint list passed to the contrastive loss")]
    EmptyConstraints,

    #[error("predicted and truth constraint lists disagree: {0}")]
    MismatchedPairs(String),

    #[error("partition length mismatch: {left} vs {right}")]
    PartitionLength { left: usize, right: usize },

    #[error("non-finite loss at restart {restart}, epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        restart: usize,
        epoch: usize,
        batch: usize,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("similarity oracle failed: {0}")]
    Oracle(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
