use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    /// A problem tied to a line of an input file.
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: u64, msg: String },

    #[error("{0}")]
    Input(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Model(#[from] spatboost::Error),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn parse(path: &str, line: u64, msg: impl Into<String>) -> Self {
        CliError::Parse {
            path: path.to_string(),
            line,
            msg: msg.into(),
        }
    }
}
