use thiserror::Error;

use crate::graph::NodeId;

/// Errors raised anywhere in the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: NodeId, op: &'static str },

    #[error("loss node must be scalar, found shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("graph contains no trainable leaf")]
    NoTrainableLeaf,

    #[error("unknown node id {0}")]
    UnknownNode(NodeId),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("container: {0}")]
    Container(String),

    #[error("optimizer: {0}")]
    Optim(#[from] crate::optim::OptimError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}
