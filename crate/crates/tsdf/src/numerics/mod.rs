//! Small dense-tensor engine with reverse-mode gradients over the fixed
//! operator set the rest of the crate needs. Forward evaluation is eager;
//! every public operation checks its output for non-finite values.

mod fd;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use fd::finite_difference_gradient;
pub use tape::{evaluate_with_gradients, NodeId, Tape};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank-{expected} input, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: non-finite value produced at node {node}")]
    NonFinite { op: &'static str, node: usize },
    #[error("{op}: {what}")]
    InvalidArg { op: &'static str, what: String },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { len: usize, shape: Vec<usize> },
}

/// Clamp every element of `t` into [-eps, eps]. Idempotent.
pub fn project_linf(t: &Tensor, eps: f32) -> Result<Tensor, NumericsError> {
    if !(eps >= 0.0) {
        return Err(NumericsError::InvalidArg {
            op: "project_linf",
            what: format!("radius must be >= 0, got {eps}"),
        });
    }
    clip_range(t, -eps, eps)
}

/// Clamp every element of `t` into [lo, hi].
pub fn clip_range(t: &Tensor, lo: f32, hi: f32) -> Result<Tensor, NumericsError> {
    if !(lo <= hi) {
        return Err(NumericsError::InvalidArg {
            op: "clip_range",
            what: format!("empty range [{lo}, {hi}]"),
        });
    }
    let data = t.data().iter().map(|&v| v.clamp(lo, hi)).collect();
    Tensor::from_vec(t.shape().to_vec(), data)
}
