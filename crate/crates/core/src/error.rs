use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("unbound input `{0}`")]
    UnboundInput(String),
    #[error("unknown output `{0}`")]
    UnknownOutput(String),
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("function not finite at probe point {0}")]
    NonFiniteProbe(usize),
    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("checkpoint: bad magic")]
    BadMagic,
    #[error("checkpoint: truncated payload (expected {expected} bytes, found {found})")]
    Truncated { expected: usize, found: usize },
    #[error("checkpoint: header/payload length mismatch ({0})")]
    HeaderMismatch(String),
    #[error("checkpoint: malformed header: {0}")]
    BadHeader(String),

    #[error("idx: wrong magic {found:#010x} (expected {expected:#010x})")]
    IdxMagic { expected: u32, found: u32 },
    #[error("idx: {images} images but {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },
    #[error("idx: file truncated")]
    IdxTruncated,

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("config: missing key `{0}`")]
    MissingKey(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category used by the CLI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. }
            | Error::NonFinite { .. }
            | Error::UnboundInput(_)
            | Error::UnknownOutput(_)
            | Error::InvalidTensor(_) => "graph",
            Error::LengthMismatch { .. } | Error::InvalidArgument(_) => "argument",
            Error::NonFiniteGradient | Error::NonFiniteProbe(_) | Error::Diverged { .. } => {
                "diverged"
            }
            Error::BadMagic
            | Error::Truncated { .. }
            | Error::HeaderMismatch(_)
            | Error::BadHeader(_) => "checkpoint",
            Error::IdxMagic { .. } | Error::IdxCountMismatch { .. } | Error::IdxTruncated => "idx",
            Error::Config { .. } | Error::MissingKey(_) => "config",
            Error::Dataset(_) => "dataset",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
