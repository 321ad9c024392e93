use thiserror::Error;

/// Error type shared across the whole pipeline. Variants map onto the
/// process exit codes used by the CLI: invalid arguments are usage errors,
/// `Io`/`Format` are data errors, `MissingPrerequisite` means an earlier
/// pipeline stage has not produced its artifact yet, and `Numeric` is a
/// non-finite value escaping a computation that must stay finite.
#[derive(Debug, Error)]
pub enum XfddError {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, XfddError>;

pub(crate) fn shape_err<T>(left: &[usize], right: &[usize]) -> Result<T> {
    Err(XfddError::ShapeMismatch { left: left.to_vec(), right: right.to_vec() })
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(XfddError::InvalidArgument(msg.into()))
}
