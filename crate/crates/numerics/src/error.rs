use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration for {op}: {msg}")]
    Config { op: &'static str, msg: String },

    #[error("label {label} at batch index {index} is out of range for {classes} classes")]
    Label {
        index: usize,
        label: usize,
        classes: usize,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("batch norm running statistics are uninitialized; run at least one training step first")]
    UninitializedStats,

    #[error("usage error: {0}")]
    Usage(String),
}

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;
