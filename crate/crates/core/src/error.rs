use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A graph node was built from operands whose shapes violate its rule.
    #[error("shape mismatch at {node}: {msg}")]
    Shape { node: String, msg: String },

    /// NaN or infinity produced while evaluating a node.
    #[error("non-finite value produced at {node}")]
    NonFinite { node: String },

    #[error("{0}")]
    Usage(String),

    #[error("config: {0}")]
    Config(String),

    #[error("config key `{key}`: {msg}")]
    ConfigKey { key: String, msg: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Training diverged; carries the iteration and whatever context the loop had.
    #[error("numeric abort: {0}")]
    Numeric(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 for usage/config problems, 2 for numeric aborts.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } | Error::Numeric(_) => 2,
            _ => 1,
        }
    }
}
