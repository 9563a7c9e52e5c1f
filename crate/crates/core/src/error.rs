use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("out of domain: {0}")]
    OutOfDomain(String),
    #[error("input not sorted by time: {0}")]
    Unsorted(String),
    #[error("missing upstream artifact: {0}")]
    MissingArtifact(String),
    #[error("singular design: {0}")]
    Singular(String),
    #[error("demeaning did not converge after {sweeps} sweeps (last change {last_change:e})")]
    NonConvergence { sweeps: usize, last_change: f64 },
    #[error("estimation error: {0}")]
    Estimation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingArtifact(_) => 2,
            Error::Singular(_) | Error::NonConvergence { .. } | Error::Estimation(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
