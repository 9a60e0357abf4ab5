//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Operations are recorded on a [`Tape`] and differentiated with
//! [`Tape::backward`] or [`Tape::grad`]. Backward rules are built from the
//! same recorded operations, which gives gradient-of-gradient support.

mod kernels;
mod tape;
mod tensor;

pub use kernels::log_sum_exp;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },
    #[error("{op}: domain error, {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("tape already consumed by a backward pass without retain_graph")]
    TapeConsumed,
    #[error("variable belongs to a different tape")]
    ForeignVar,
}

/// Compares the tape gradient of `f` at `point` with central differences.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, point: &Tensor, epsilon: f64) -> Result<f64, GraphError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, GraphError>,
{
    assert!(epsilon > 0.0, "epsilon must be positive");
    let analytic = {
        let tape = Tape::new();
        let x = tape.param(point.clone());
        let y = f(&tape, x)?;
        tape.backward(y, false)?.tensor(x)
    };
    let eval = |p: Tensor| -> Result<f64, GraphError> {
        let tape = Tape::new();
        let x = tape.constant(p);
        Ok(f(&tape, x)?.item())
    };
    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += epsilon;
        let mut minus = point.clone();
        minus.data_mut()[i] -= epsilon;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * epsilon);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
