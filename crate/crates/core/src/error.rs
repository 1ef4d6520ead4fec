use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("index {index} out of range for {what} of length {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("capacity exceeded: {len} segments requested, model holds at most {capacity}")]
    Capacity { len: usize, capacity: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("checkpoint does not match configuration: field `{field}` is {checkpoint} in the checkpoint but {expected} was requested")]
    Mismatch {
        field: &'static str,
        checkpoint: String,
        expected: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Process exit code used by the command line front end.
    ///
    /// 2 for configuration and validation failures, 3 for numeric or
    /// capacity failures at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) | Error::Capacity { .. } => 3,
            _ => 2,
        }
    }
}
