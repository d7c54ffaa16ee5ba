use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid shape {dims:?}: {reason}")]
    InvalidShape { dims: Vec<usize>, reason: &'static str },
    #[error("element count of shape {0:?} overflows usize")]
    Overflow(Vec<usize>),
    #[error("data length {got} does not match shape {dims:?} (expected {expected})")]
    DataLength {
        dims: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("mode {mode} out of range for tensor of order {order}")]
    ModeOutOfRange { mode: usize, order: usize },
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op} requires {expected}")]
    Unsupported { op: &'static str, expected: &'static str },
}

#[derive(Debug, Error)]
pub enum IoError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },
    #[error("trailing bytes after payload: {0}")]
    TrailingBytes(u64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KronError {
    #[error("matrix side {side} does not equal product of dims {dims:?}")]
    SideMismatch { side: usize, dims: Vec<usize> },
    #[error("inconsistent factor shapes: {0}")]
    Inconsistent(String),
    #[error("rank must be at least 1")]
    ZeroRank,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("token count {tokens} exceeds oracle cap {cap}")]
    OracleCap { tokens: usize, cap: usize },
    #[error("invalid attention weights: {0}")]
    InvalidWeights(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
