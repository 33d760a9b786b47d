use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("unknown symbol: {0}")]
    UnknownSymbol(String),

    #[error("target of length {len} needs at least {needed} frames, have {frames}")]
    InfeasibleTarget {
        len: usize,
        needed: usize,
        frames: usize,
    },

    #[error("target assigns zero probability to every alignment")]
    ZeroLikelihood,

    #[error("the blank symbol cannot be emitted as a label")]
    BlankSymbol,

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("checkpoint version error: {0}")]
    CheckpointVersion(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("missing keys: {0}")]
    MissingKeys(String),

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// True when the root cause is a filesystem failure.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io { .. } => true,
            Error::Stage { source, .. } => source.is_io(),
            _ => false,
        }
    }
}

pub(crate) trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| match e {
            already @ Error::Stage { .. } => already,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        })
    }
}
