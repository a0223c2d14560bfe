use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("row {row} has norm {norm:e}, cannot normalize")]
    DegenerateRow { row: usize, norm: f64 },

    #[error("label {label} at index {index} is out of range for {num_classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        num_classes: usize,
    },

    #[error("probability {value} at index {index} is outside (0, 1); missing sigmoid?")]
    ProbabilityOutOfRange { index: usize, value: f64 },

    #[error("degenerate batch: no positive pair")]
    DegenerateBatch,

    #[error("no cross-domain anchors: no class present in both domains")]
    NoCrossDomainAnchors,

    #[error("epoch {epoch} exceeds total epochs {total}")]
    EpochOutOfRange { epoch: usize, total: usize },

    #[error("missing loss term {0}")]
    MissingLoss(&'static str),

    #[error("non-finite gradient in parameter {param} at coordinate {coord}: {value}")]
    NonFiniteGradient {
        param: usize,
        coord: usize,
        value: f64,
    },

    #[error("training diverged at epoch {epoch} ({detail}); last good checkpoint: {}", last_checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    Diverged {
        epoch: usize,
        detail: String,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    InvalidConfig(Vec<String>),

    #[error("{0}")]
    Format(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
