use std::path::PathBuf;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error(transparent)]
    Kernel(#[from] numkernel::KernelError),
    #[error("missing dataset file {0}")]
    MissingFile(PathBuf),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    FeatureDimMismatch { expected: usize, got: usize },
    #[error("feature rows ({features}) and label rows ({labels}) disagree")]
    RowCountMismatch { features: usize, labels: usize },
    #[error("invalid synthetic spec: {0}")]
    InvalidSyntheticSpec(String),
    #[error("contrastive loss needs a batch of at least 2 graphs, got {0}")]
    BatchTooSmall(usize),
    #[error("architecture augmentation: r1 must be >= 1, got {0}")]
    BadAugRatio(f64),
    #[error("non-finite loss at epoch {epoch} during the {stage} step")]
    NanLoss { epoch: usize, stage: &'static str },
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("probe: {0}")]
    Probe(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
