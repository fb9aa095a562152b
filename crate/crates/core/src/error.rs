use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MmptError {
    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, MmptError>;

impl MmptError {
    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            MmptError::Numeric(_) => 2,
            MmptError::Io(_) | MmptError::Checkpoint(_) => 3,
            _ => 1,
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::MmptError::Shape(format!($($arg)*)) };
}

macro_rules! invalid_arg {
    ($($arg:tt)*) => { $crate::error::MmptError::InvalidArgument(format!($($arg)*)) };
}

pub(crate) use invalid_arg;
pub(crate) use shape_err;
