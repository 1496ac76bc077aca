use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GemsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GemsError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid config `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: line {line} (byte offset {offset}): {message}")]
    Parse {
        path: String,
        line: usize,
        offset: u64,
        message: String,
    },

    #[error("user {user_id}: timestamps are not strictly increasing (event {index})")]
    NonMonotone { user_id: u64, index: usize },

    #[error("bad file format in {path}: {message}")]
    Format { path: String, message: String },

    #[error("missing artifact {path}; run `gems {producer}` first")]
    MissingArtifact { path: PathBuf, producer: &'static str },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl GemsError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        GemsError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn format(path: impl Into<String>, message: impl Into<String>) -> Self {
        GemsError::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            GemsError::Config { .. } | GemsError::MissingArtifact { .. } => 1,
            GemsError::Data(_)
            | GemsError::Parse { .. }
            | GemsError::NonMonotone { .. }
            | GemsError::Format { .. } => 2,
            GemsError::Dimension { .. } | GemsError::Contract(_) | GemsError::Io(_) => 3,
        }
    }
}
