use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Data(String),

    #[error("{0}")]
    Verify(String),

    #[error(transparent)]
    Core(#[from] mnagt::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Verify(_) => 3,
            CliError::Core(e) if e.is_data_error() => 2,
            CliError::Core(mnagt::Error::Config(_)) => 1,
            // Shape, numeric and autodiff failures mid-run are bugs or bad
            // checkpoints; report them with the data code.
            CliError::Core(_) => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
