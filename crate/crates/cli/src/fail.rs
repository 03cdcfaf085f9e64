use std::fmt;

use crimecast::Error;

/// Command failures, each mapped to its own exit status.
#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration or arguments.
    Config(String),
    /// Unreadable or malformed inputs, or a missing prerequisite.
    Input(String),
    /// Failure while computing.
    Runtime(String),
    /// Provenance check found mismatches.
    Verify(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Input(_) => 3,
            CliError::Runtime(_) => 4,
            CliError::Verify(_) => 5,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
            CliError::Verify(m) => write!(f, "verification failed: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Argument(_) => CliError::Config(msg),
            Error::Geometry(_)
            | Error::Io { .. }
            | Error::Parse { .. }
            | Error::Cache(_)
            | Error::Csv(_)
            | Error::Json(_) => CliError::Input(msg),
            Error::Metric(_) => CliError::Runtime(msg),
        }
    }
}
