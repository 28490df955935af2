use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {index} out of range in {op} (bound {bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("axis {axis} invalid for rank-{rank} tensor")]
    Axis { axis: usize, rank: usize },

    #[error("shape {shape:?} does not describe {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("empty loss: every position is ignored")]
    EmptyLoss,

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("tensors recorded on different tapes")]
    TapeMismatch,

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;
