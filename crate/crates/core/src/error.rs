use thiserror::Error;

use crate::comm::CommError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error(transparent)]
    Comm(#[from] CommError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid layer pattern character {0:?} (expected 'L' or 'N')")]
    InvalidPattern(char),

    #[error("missing activation cache: {0}")]
    MissingCache(&'static str),

    #[error("loss evaluation returned a non-finite value at entry ({row}, {col})")]
    NonFinite { row: usize, col: usize },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: String) -> Self {
        Error::Shape { op, detail }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
