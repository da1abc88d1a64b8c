use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("network produced a non-finite {what}")]
    NonFinite { what: &'static str },

    #[error("weight file format error: {0}")]
    Format(String),

    #[error("layer {layer}: expected {expected}, found {found}")]
    Dimension {
        layer: usize,
        expected: String,
        found: String,
    },

    #[error("nothing to train")]
    NothingToTrain,

    #[error("weights file not found: {}", .0.display())]
    MissingWeights(PathBuf),

    #[error("training diverged in batch {batch}: {source}")]
    TrainingDiverged {
        batch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("metadata: {0}")]
    Metadata(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
