use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, configuration or inputs; exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Failure while running a valid request; exit code 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<usst::Error> for CliError {
    fn from(e: usst::Error) -> Self {
        match e {
            usst::Error::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

/// Wraps errors met while reading inputs or preparing outputs.
pub fn usage(context: impl std::fmt::Display) -> impl FnOnce(usst::Error) -> CliError {
    move |e| CliError::Usage(format!("{context}: {e}"))
}
