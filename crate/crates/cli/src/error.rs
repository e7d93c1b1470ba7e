use thiserror::Error;

/// Errors surfaced by the harness. All of them are runtime failures (exit
/// code 2); usage errors are reported by the argument parser.
#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Model(#[from] tlrm::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
