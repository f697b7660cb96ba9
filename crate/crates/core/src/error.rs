use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong between scenario configuration and a trained
/// checkpoint. Variants are grouped so a front end can map them onto exit
/// codes with [`Error::kind`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("path {path} has delay {delay_ns:.3} ns, not below the cyclic prefix span {limit_ns:.3} ns")]
    DelayOutOfRange { path: usize, delay_ns: f64, limit_ns: f64 },

    #[error(
        "scenario too large: a {kind} path of {distance_m:.1} m needs {delay_ns:.1} ns but the cyclic prefix spans \
         {limit_ns:.1} ns; raise the cyclic prefix length or shrink the scene bounds"
    )]
    ScenarioTooLarge { kind: &'static str, distance_m: f64, delay_ns: f64, limit_ns: f64 },

    #[error("unknown {what} {id}")]
    Lookup { what: &'static str, id: usize },

    #[error("{0}")]
    Validation(String),

    #[error("{path}: not a {expected} file (bad magic)")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("{path}: format version {found} is not supported (expected {expected})")]
    Version { path: PathBuf, found: u16, expected: u16 },

    #[error("{path}: truncated ({detail})")]
    Truncated { path: PathBuf, detail: String },

    #[error("{path}: checksum mismatch in {section}")]
    Checksum { path: PathBuf, section: String },

    #[error("{path}: malformed contents: {detail}")]
    Malformed { path: PathBuf, detail: String },

    #[error("tensor `{name}` has shape {found:?}, the model expects {expected:?}")]
    TensorShape { name: String, expected: Vec<usize>, found: Vec<usize> },

    #[error("incompatible {what}: checkpoint has {left}, data has {right}")]
    Compat { what: &'static str, left: String, right: String },

    #[error("loss became {loss} at iteration {iteration} (lr {lr}, batch sample ids {batch:?})")]
    NonFiniteLoss { iteration: usize, loss: f32, lr: f32, batch: Vec<usize> },

    #[error(transparent)]
    Numerics(#[from] blockwatch_numerics::NumericsError),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Internal,
}

impl Error {
    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config { field: field.into(), msg: msg.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config { .. } | Error::ScenarioTooLarge { .. } => ErrorKind::Config,
            Error::NonFiniteLoss { .. } | Error::Numerics(_) => ErrorKind::Internal,
            _ => ErrorKind::Data,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
