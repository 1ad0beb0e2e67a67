use thiserror::Error;

/// Failures that end a command, split by exit status.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments, configuration or input files; nothing is written.
    #[error("{0}")]
    Usage(String),
    /// The analysis ran but failed (non-convergence, too many failed
    /// replicates). Artifacts may have been written.
    #[error("{0}")]
    Analysis(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Analysis(_) => 1,
        }
    }
}

impl From<poppk_core::Error> for CliError {
    fn from(e: poppk_core::Error) -> Self {
        match e {
            poppk_core::Error::Estimation(_) | poppk_core::Error::Evaluation(_) => CliError::Analysis(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(format!("io error: {e}"))
    }
}
