use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, bad config file or out-of-range parameters.
    #[error("{0}")]
    Usage(String),

    /// Input files that are missing, malformed or inconsistent.
    #[error("{0}")]
    Data(String),

    /// `validate` found problems.
    #[error("{0} problem(s) found")]
    Invalid(usize),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
        }
    }
}

impl From<oodcal_core::Error> for CliError {
    fn from(e: oodcal_core::Error) -> Self {
        match e {
            oodcal_core::Error::Parameter(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}
