//! Minimal tape-based reverse-mode automatic differentiation.
//!
//! Tensors are dense row-major `f64` arrays. Operations executed through a
//! [`Tape`] record a node whenever any input requires gradients; a single
//! reverse sweep over the tape populates the `grad` field of every
//! participating tensor. The op set is exactly what the networks and losses
//! in this crate need: 3x3 convolutions (stride 1 or 2, zero padding 1),
//! matmul, elementwise arithmetic, relu/sigmoid, nearest 2x upsampling,
//! global average pooling, batch normalization, channel concatenation,
//! softmax cross-entropy with soft targets, pairwise L2 distance, and
//! mean reductions.
//!
//! Everything is double precision and single-threaded; forward results are
//! bit-identical across runs for identical inputs.

mod conv;
mod gradcheck;
mod params;
mod sgd;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use params::{ParamEntry, ParamStore};
pub use sgd::Sgd;
pub use tape::{softmax_rows, Tape};
pub use tensor::Tensor;

#[doc(hidden)]
pub use conv::{backward_input_single as bench_backward_input, backward_weight_single as bench_backward_weight, forward_single as bench_forward};

use thiserror::Error;

/// Errors from tensor construction, shape checking, and the backward pass.
#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: invalid attribute: {detail}")]
    BadAttribute { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter '{0}' has no gradient; run backward first")]
    MissingGrad(String),
    #[error("parameter store: {0}")]
    BadParamFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DiffError>;
