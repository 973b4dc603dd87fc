use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("noise rate undefined for observed class {0}: it receives no probability mass")]
    UndefinedRate(usize),
    #[error("enumeration of {0} classifiers exceeds the limit of {1}")]
    Size(u128, u128),
    #[error("outside domain: {0}")]
    Domain(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("lookup failed: {0}")]
    Lookup(String),
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("internal invariant violated: {0}")]
    Internal(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    /// Process exit code used by the command-line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Diverged { .. } => 3,
            Error::Io(_) | Error::Csv(_) => 4,
            _ => 2,
        }
    }
}
