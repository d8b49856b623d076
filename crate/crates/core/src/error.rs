use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised anywhere in the pipeline.
///
/// Variants are split into two families: malformed or inconsistent input
/// (files, manifests, shapes) and failures of the computation itself. The
/// CLI maps the first family to exit code 2 and the second to exit code 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported {format} version {found} (expected {expected})")]
    VersionMismatch {
        format: &'static str,
        expected: u16,
        found: u16,
    },

    #[error("truncated {format} payload: needed {needed} bytes, have {available}")]
    Truncated {
        format: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("{format} has {extra} trailing bytes after the declared payload")]
    TrailingBytes { format: &'static str, extra: usize },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("duplicate image id {0:?}")]
    DuplicateId(String),

    #[error("unknown image id {0:?}")]
    UnknownId(String),

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("missing input files:\n{}", .0.iter().map(|p| format!("  {}", p.display())).collect::<Vec<_>>().join("\n"))]
    MissingFiles(Vec<PathBuf>),

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("need at least {needed} points, got {available}")]
    TooFewPoints { needed: usize, available: usize },

    #[error("normalization state {actual} not valid here (expected {expected})")]
    NormalizationState {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("descriptor set must be L2-normalized before encoding")]
    Unnormalized,

    #[error("query {0:?} has no positives")]
    NoPositives(String),

    #[error("{0}")]
    Computation(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }

    /// True for errors caused by the inputs rather than the computation.
    pub fn is_input_error(&self) -> bool {
        !matches!(
            self,
            Error::TooFewPoints { .. } | Error::NoPositives(_) | Error::Computation(_)
        )
    }
}
