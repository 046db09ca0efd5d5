use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("shape dimension must be positive, got {0:?}")]
    ZeroDim(Vec<usize>),

    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },

    #[error("index {index} out of range for {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },

    #[error("{0}: empty input")]
    Empty(&'static str),

    #[error("loss is not finite: {0}")]
    NonFinite(f64),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
