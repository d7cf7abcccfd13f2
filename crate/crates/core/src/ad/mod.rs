//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Forward computations are recorded on a [`Tape`]; [`Tape::backward`] replays
//! it in reverse creation order. Coordinate derivatives needed by PDE
//! residuals are obtained with [`Dual`] tangents built from the same
//! primitives, so they remain differentiable in the network weights.

mod check;
mod dual;
mod ops;
mod tape;
mod tensor;

pub use check::{gradient_check, GradCheck};
pub use dual::{check_unit_domain, coord_jacobian, Dual, AXES};
pub(crate) use ops::sigmoid;
pub use tape::{Backward, Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("gradient requested of non-scalar output with shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("node {0} is a constant and cannot receive gradients")]
    Detached(usize),
    #[error("non-finite value in {pass} pass at node {node} ({op})")]
    NonFinite {
        node: usize,
        op: &'static str,
        pass: &'static str,
    },
    #[error("out of domain: {0}")]
    OutOfDomain(String),
    #[error("degenerate rotation: quaternion norm {0:e} below 1e-8")]
    DegenerateRotation(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
