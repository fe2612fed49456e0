use sca_core::ScaError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] ScaError),

    #[error("config error: {0}")]
    Config(String),

    #[error("run directory error: {0}")]
    Run(String),
}

impl CliError {
    /// 2 config, 3 data or files, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run(_) => 3,
            CliError::Core(e) => match e {
                ScaError::Config { .. } => 2,
                ScaError::Data(_) | ScaError::Io(_) | ScaError::Json(_) | ScaError::Csv(_) => 3,
                ScaError::Numeric(_)
                | ScaError::Domain(_)
                | ScaError::Dimension(_)
                | ScaError::StaleCache => 4,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
