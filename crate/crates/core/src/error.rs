use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: row {row} has no attendable position")]
    FullyMasked { op: &'static str, row: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("training diverged in phase {phase}: {detail}")]
    Diverged { phase: u8, detail: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error at {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by NaN/inf values or divergence.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::Diverged { .. })
    }

    /// True for failures caused by bad inputs on disk or in corpora.
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            Error::Data(_) | Error::Checkpoint(_) | Error::Io { .. } | Error::Json(_)
        )
    }
}
