use thiserror::Error;

use crate::tape::OpKind;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: OpKind, detail: String },

    #[error("{op}: non-finite value in output (element {index})")]
    NumericFault { op: OpKind, index: usize },

    #[error("tensor with {len} elements cannot have shape {shape:?}")]
    ElementCount { len: usize, shape: Vec<usize> },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("backward called on a tensor that is not recorded on this tape")]
    Detached,

    #[error("tensor belongs to a different tape (or a tape already consumed by backward)")]
    ForeignTape,

    #[error("parameter {0:?} already registered")]
    DuplicateParam(String),

    #[error("unknown parameter {0:?}")]
    UnknownParam(String),

    #[error("parameter {name:?}: expected shape {expected:?}, got {got:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("checkpoint corrupt at byte {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_err<T>(op: OpKind, detail: impl Into<String>) -> Result<T> {
    Err(TensorError::Shape {
        op,
        detail: detail.into(),
    })
}
