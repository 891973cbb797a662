use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid field `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("layer {index}: {message}")]
    Layer { index: usize, message: String },

    #[error("invalid parallelism config: {0}")]
    Config(String),

    #[error("no feasible strategy: {0}")]
    NoFeasibleStrategy(String),

    #[error("instance too large for oracle: {0}")]
    OracleGuard(String),

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
