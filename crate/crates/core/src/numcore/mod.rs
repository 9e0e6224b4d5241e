//! Dense float64 tensors with a dynamic reverse-mode tape.
//!
//! Every forward pass builds a fresh [`Tape`]; parameters enter as
//! [`Tape::param`] leaves and inputs as [`Tape::constant`] leaves.
//! [`Tape::backward`] sweeps the record once in reverse and returns
//! [`Gradients`] without mutating the tape, so it may be replayed.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{
    all_coords, compare_gradients, grad_check, relative_error, CoordCheck, GradCheckConfig, GradCheckReport,
};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Guard used by every normalization and cosine similarity.
pub const EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("invalid axis: {0}")]
    Axis(String),
    #[error("contract violation: {0}")]
    Contract(String),
}
