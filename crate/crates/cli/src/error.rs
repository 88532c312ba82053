//! Error taxonomy mapped to process exit codes: usage 1, data 2, runtime 3.

use std::fmt;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad config keys, invalid combinations.
    Usage(String),
    /// Missing or corrupt artifacts, infeasible specs, mismatched hashes.
    Data(anyhow::Error),
    /// Failures while doing the work: training divergence, IO, timing.
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn data(err: impl Into<anyhow::Error>) -> Self {
        CliError::Data(err.into())
    }

    pub fn data_msg(msg: impl fmt::Display) -> Self {
        CliError::Data(anyhow::anyhow!("{msg}"))
    }

    pub fn runtime(err: impl Into<anyhow::Error>) -> Self {
        CliError::Runtime(err.into())
    }

    pub fn runtime_msg(msg: impl fmt::Display) -> Self {
        CliError::Runtime(anyhow::anyhow!("{msg}"))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage error: {msg}"),
            CliError::Data(err) => write!(f, "data error: {err:#}"),
            CliError::Runtime(err) => write!(f, "runtime error: {err:#}"),
        }
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = Result<T, CliError>;
