use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("{0} is empty")]
    EmptySet(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("epoch {epoch} outside schedule of {total} epochs")]
    EpochOutOfRange { epoch: usize, total: usize },
    #[error("non-finite gradient at attack step {step}")]
    AttackNonFinite { step: usize },
    #[error("non-finite gradient for minibatch {batch}")]
    NonFiniteBatchGradient { batch: usize },
    #[error("fraction too small for batch size: floor({fraction} * {n} / {batch_size}) = 0")]
    FractionTooSmall {
        fraction: f64,
        n: usize,
        batch_size: usize,
    },
    #[error("sets overlap on minibatch {0}")]
    OverlappingSets(usize),
    #[error("{combinations} subsets exceed the enumeration cap of {cap}; use a smaller instance")]
    OracleCapExceeded { combinations: u128, cap: u128 },
    #[error("coreset results come from different partitions")]
    PartitionMismatch,
    #[error("labels contain a single class")]
    DegenerateLabels,
    #[error("checkpoint was built for a different model configuration")]
    ConfigMismatch,
    #[error("selection aborted at epoch {epoch}: {source}")]
    Selection {
        epoch: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("gradient accounting mismatch: {0}")]
    Accounting(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
