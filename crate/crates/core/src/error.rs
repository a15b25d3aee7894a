use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("unit value at index {index} is {value}, expected 0 or 1")]
    NonBinary { index: usize, value: u8 },

    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("structure mismatch: {0}")]
    StructureMismatch(String),

    #[error("exact enumeration over {n_hidden} hidden units exceeds the cap of {cap}")]
    SupportCapExceeded { n_hidden: usize, cap: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("action index {index} out of range for action space of size {size}")]
    InvalidAction { index: usize, size: usize },

    #[error("episode is done; reset before stepping")]
    EpisodeDone,

    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn dim(what: &'static str, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            what,
            expected,
            got,
        }
    }
}
