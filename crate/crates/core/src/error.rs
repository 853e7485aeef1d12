use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FastError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FastError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("unknown token `{0}`")]
    Vocab(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("state error: {0}")]
    State(String),

    #[error("invalid corpus spec: {0}")]
    Spec(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("training diverged at {stage} iteration {iteration}: loss = {loss}")]
    Divergence {
        stage: &'static str,
        iteration: usize,
        loss: f64,
    },

    #[error("pair `{0}` cannot be traced: only subject-flip pairs are traceable")]
    UnsupportedTrace(String),

    #[error("{path}: bad checkpoint magic")]
    BadMagic { path: PathBuf },

    #[error("{path}: checkpoint format version {found} is not supported (expected {expected}); re-export with a matching toolkit version")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: checksum mismatch (stored {stored:#018x}, computed {computed:#018x})")]
    Checksum {
        path: PathBuf,
        stored: u64,
        computed: u64,
    },

    #[error("{path}: malformed checkpoint: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

impl FastError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FastError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        FastError::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
