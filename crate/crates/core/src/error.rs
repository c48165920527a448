use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("degenerate vector `{0}`: zero norm")]
    DegenerateVector(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("unknown id `{0}`")]
    UnknownId(String),

    #[error("missing embedding for text `{0}`")]
    MissingEmbedding(String),

    #[error("mixed embedding kinds in one mean")]
    MixedKind,

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid consistency matrix: {0}")]
    InvalidMatrix(String),

    #[error("generation contained no descriptors")]
    EmptyGeneration,

    #[error("world generation failed: {0}")]
    Generation(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn parse(location: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.to_string(),
        }
    }
}
