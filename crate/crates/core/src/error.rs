use std::io;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: lhs={lhs:?}, rhs={rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("matrix is singular or not positive definite (pivot {pivot} = {value:e})")]
    Singular { pivot: usize, value: f64 },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient in tensor `{tensor}`")]
    NonFiniteGradient { tensor: &'static str },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("unstable autoregressive process: {0}")]
    Stability(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("format error in field `{field}`: {msg}")]
    Format { field: &'static str, msg: String },
    #[error("no positive contribution to class {class_idx}")]
    NoPositiveContribution { class_idx: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parameter(msg.into()))
}
