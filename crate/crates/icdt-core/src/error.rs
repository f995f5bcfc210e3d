//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A scalar argument is outside its documented range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A model/run configuration violates one of its invariants.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A trainable component was used before it was trained.
    #[error("not fitted: {0}")]
    NotFitted(String),

    /// Optimizer/training state is inconsistent (e.g. misaligned gradient names).
    #[error("state error: {0}")]
    State(String),

    /// A checkpoint, config file, or dataset failed to parse.
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
