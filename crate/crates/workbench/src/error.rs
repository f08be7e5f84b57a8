use thiserror::Error;

/// Failures surfaced by the command-line tool, each with a fixed exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::IncompatibleCheckpoint(_) => 1,
            CliError::Data(_) | CliError::Io { .. } => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }
}

impl From<dlm_core::Error> for CliError {
    fn from(e: dlm_core::Error) -> Self {
        use dlm_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Data(_) => CliError::Data(msg),
            E::Numeric(_) | E::Domain(_) | E::InvalidRatio(_) | E::UnreachableState(_) | E::InfiniteKl => {
                CliError::Numeric(msg)
            }
            _ => CliError::Config(msg),
        }
    }
}
