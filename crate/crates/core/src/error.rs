use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wrong IDX magic: expected {expected:#010x}, found {found:#010x}")]
    WrongMagic { expected: u32, found: u32 },

    #[error("truncated file: header promises {expected} bytes, found {actual}")]
    TruncatedFile { expected: usize, actual: usize },

    #[error("label {label} at index {index} is outside 0..=9")]
    LabelOutOfRange { index: usize, label: u8 },

    #[error("no examples left after filtering to digits {keep:?}")]
    EmptyResult { keep: Vec<u8> },

    #[error("{0} is empty")]
    EmptyInput(&'static str),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("loss node must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("unknown architecture '{0}'")]
    UnknownArchitecture(String),

    #[error("invalid label {label} for a head with {classes} output(s)")]
    InvalidLabel { label: usize, classes: usize },

    #[error("training diverged at epoch {epoch}, step {step}")]
    DivergedLoss { epoch: usize, step: usize },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptPayload(String),

    #[error("cannot select {k} features out of {n}")]
    CountTooLarge { k: usize, n: usize },

    #[error("AUROC needs at least one positive and one negative label")]
    SingleClass,

    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the environment or user input rather than a
    /// failed check. The CLI maps these to exit code 2.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::WrongMagic { .. }
                | Error::TruncatedFile { .. }
                | Error::LabelOutOfRange { .. }
                | Error::MissingCheckpoint(_)
                | Error::Config(_)
                | Error::Json(_)
                | Error::VersionMismatch { .. }
                | Error::CorruptPayload(_)
                | Error::UnknownArchitecture(_)
        )
    }
}
