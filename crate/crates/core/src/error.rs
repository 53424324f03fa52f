use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerical failure at iteration {iter}: {msg}")]
    Numerical { iter: usize, msg: String },

    #[error("argument error: {0}")]
    Argument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 I/O, 3 numerical, 4 config/shape mismatch.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 2,
            Error::Numerical { .. } => 3,
            _ => 4,
        }
    }
}
