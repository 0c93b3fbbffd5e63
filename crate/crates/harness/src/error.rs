use thiserror::Error;

/// Failures split by exit code: bad input (1) versus a run that broke (2).
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("run failed: {0}")]
    Run(String),
}

pub type HarnessResult<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub fn usage(e: impl std::fmt::Display) -> Self {
        HarnessError::Usage(e.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) => 1,
            HarnessError::Run(_) => 2,
        }
    }
}

impl From<moeulab::Error> for HarnessError {
    fn from(e: moeulab::Error) -> Self {
        match e {
            moeulab::Error::Config(_) => HarnessError::Usage(e.to_string()),
            other => HarnessError::Run(other.to_string()),
        }
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Run(e.to_string())
    }
}
