use thiserror::Error;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("oracle failure: {0}")]
    Oracle(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FusionError>;

impl From<serde_json::Error> for FusionError {
    fn from(e: serde_json::Error) -> Self {
        FusionError::Config(e.to_string())
    }
}

impl From<csv::Error> for FusionError {
    fn from(e: csv::Error) -> Self {
        FusionError::Data(e.to_string())
    }
}
