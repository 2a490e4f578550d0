//! Minimal reverse-mode differentiation over dense `f64` arrays.
//!
//! Values live on a [`Tape`]; each primitive appends one node and backward
//! visits the nodes in reverse order. Only the primitives needed by the
//! equivariant layers, the graph encoder and the occupancy decoder exist.

mod gradcheck;
pub mod ops;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, relative_error, GradCheckReport};
pub use ops::{Primitive, BCE_CLAMP, NORMALIZE_EPS};
pub use tape::{Gradients, SwitchingMargins, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch in {kind}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { kind: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{kind} expects {expected} inputs, got {got}")]
    Arity { kind: &'static str, expected: usize, got: usize },
    #[error("non-finite input to {kind}")]
    NonFinite { kind: &'static str },
    #[error("row index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("loss must hold a single value, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape was created without recording")]
    NotRecording,
    #[error("parameter {0:?} registered twice")]
    DuplicateParam(String),
    #[error("{0}")]
    InvalidArgument(&'static str),
    #[error(
        "gradient check failed at input {input} entry {index}: analytic {analytic:e}, \
         numeric {numeric:e}, relative error {rel_error:e}"
    )]
    GradCheck { input: usize, index: usize, analytic: f64, numeric: f64, rel_error: f64 },
}

/// Evaluates a single primitive without a tape.
///
/// Safe to call from many threads at once.
pub fn primitive_forward(prim: &Primitive, inputs: &[Tensor]) -> Result<Tensor, DiffError> {
    if inputs.iter().any(|t| !t.is_finite()) {
        return Err(DiffError::NonFinite { kind: prim.name() });
    }
    let refs: Vec<&Tensor> = inputs.iter().collect();
    ops::forward(prim, &refs).map(|(t, _)| t)
}
