use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("resource limit: {0}")]
    ResourceLimit(String),

    #[error("non-finite value at coordinate {coordinate}: {message}")]
    Numerical { coordinate: usize, message: String },

    #[error("parse error at byte {offset}: {message}")]
    ParseAt { offset: usize, message: String },

    #[error("parse error on line {line}: {message}")]
    ParseLine { line: usize, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged at iteration {iteration} (loss {loss})")]
    TrainingDiverged { iteration: usize, loss: f64 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidInput(format!($($arg)*))
    };
}
pub(crate) use invalid;
