use std::fmt::Display;

/// Exit status contract: 0 success, 1 runtime failure, 2 usage or input error.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

pub fn input(e: impl Display) -> CliError {
    CliError::Input(e.to_string())
}

pub fn runtime(e: impl Display) -> CliError {
    CliError::Runtime(e.to_string())
}

// Anything not explicitly tagged as bad input at the call site is a runtime failure.
impl From<gestor_core::Error> for CliError {
    fn from(e: gestor_core::Error) -> Self {
        runtime(e)
    }
}

impl From<gestor_data::DataError> for CliError {
    fn from(e: gestor_data::DataError) -> Self {
        runtime(e)
    }
}

impl From<gestor_metrics::MetricsError> for CliError {
    fn from(e: gestor_metrics::MetricsError) -> Self {
        runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        runtime(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        runtime(e)
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        runtime(e)
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
