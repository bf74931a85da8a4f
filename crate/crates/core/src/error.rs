use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::OpKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op:?}: incompatible shapes {lhs:?} and {rhs:?}")]
    Dimension {
        op: OpKind,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value at coordinate {coordinate} during {context}")]
    NonFinite { context: String, coordinate: usize },

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("SMILES parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("invalid graph data at node {node}: {message}")]
    Data { node: usize, message: String },

    #[error("line {line}: field `{field}`: {message}")]
    Schema {
        line: usize,
        field: String,
        message: String,
    },

    #[error("score undefined: {0}")]
    UndefinedScore(String),

    #[error("training diverged at epoch {epoch}, step {step}")]
    Divergence { epoch: usize, step: u64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
