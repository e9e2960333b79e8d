use std::path::Path;

use thiserror::Error;

/// CLI failure classified by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        CliError::Data(format!("{}: {err}", path.display()))
    }
}

impl From<contextad::Error> for CliError {
    fn from(err: contextad::Error) -> Self {
        use contextad::Error as E;
        let msg = err.to_string();
        match err {
            E::Config(_) | E::BatchTooSmall(_) => CliError::Config(msg),
            E::NonFinite(_) | E::NonFiniteLoss { .. } | E::ZeroVector => CliError::Numeric(msg),
            _ => CliError::Data(msg),
        }
    }
}
