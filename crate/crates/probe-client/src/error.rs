use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid endpoint config: {0}")]
    Config(String),
    #[error("endpoint returned {status}: {body}")]
    Status { status: u16, body: String },
    #[error("gave up after {attempts} attempts; last failure: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("problem {problem}: collected {correct} correct and {incorrect} incorrect outputs within the budget")]
    Shortfall { problem: String, correct: usize, incorrect: usize },
    #[error("http: {0}")]
    Http(#[from] reqwest::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
