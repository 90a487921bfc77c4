use std::path::PathBuf;

/// Errors surfaced by every layer of the simulator.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("no feasible model for client {client}: binding constraint is {constraint}")]
    Infeasible { client: usize, constraint: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the CLI: 2 config, 3 infeasible, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Infeasible { .. } => 3,
            Error::Io { .. } | Error::Parse { .. } => 4,
            Error::Shape(_) | Error::InvalidArgument(_) | Error::Diverged(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
