//! Minimal reverse-mode automatic differentiation over dense tensors, plus Adam.

mod adam;
mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{analytic_grad, grad_check};
pub use tape::{Gradients, Tape, Var, L2_EPS, LEAKY_SLOPE};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} needs a different element count than {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable is not recorded on this tape")]
    NotOnTape,
    #[error("empty input")]
    Empty,
}
