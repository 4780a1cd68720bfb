use std::path::PathBuf;

/// Crate-wide error type.
///
/// Variants are grouped by failure class so that callers (notably the CLI)
/// can map them onto stable exit codes: configuration problems, data/I-O
/// problems, and numerical failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration or arguments (bad shapes requested, K too
    /// large, unknown hook name, ...).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Tensor shape mismatch between an operation and its operands.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// Filesystem failure, annotated with the path involved.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed, truncated or incompatible checkpoint file.
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),

    /// Numerical failure: non-finite values, diverging training, a
    /// factorization that cannot succeed.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Classifies a csv-crate error as I/O or data, keeping the path.
    pub fn csv(path: impl Into<PathBuf>, e: csv::Error) -> Self {
        let path = path.into();
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io { path, source: io },
            other => Error::Data(format!("csv error on {}: {other:?}", path.display())),
        }
    }
}

/// Ways a checkpoint file can fail to load, kept distinct so callers can
/// tell an unrelated file from a stale or damaged one.
#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint file")]
    Truncated,
    #[error("model fingerprint mismatch: checkpoint {found}, expected {expected}")]
    FingerprintMismatch { found: String, expected: String },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

pub type Result<T> = std::result::Result<T, Error>;
