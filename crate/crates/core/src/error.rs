use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// All fallible operations in this crate report through this type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("task error: {0}")]
    Task(String),

    #[error("pipeline op `{op}`: {msg}")]
    PipeOp { op: String, msg: String },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("learner `{learner}`: {msg}")]
    Learner { learner: String, msg: String },

    #[error("parameter `{param}`: {msg}")]
    Param { param: String, msg: String },

    #[error("marshal format: {0}")]
    Marshal(String),

    #[error("csv: {0}")]
    Csv(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn pipeop(op: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::PipeOp { op: op.into(), msg: msg.into() }
    }

    pub fn learner(learner: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Learner { learner: learner.into(), msg: msg.into() }
    }
}
