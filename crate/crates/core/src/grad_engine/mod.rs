//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! Scope is what a small WGAN-GP needs: dense, strided convolution,
//! transposed convolution, leaky ReLU and tanh/sigmoid heads, per-example
//! gradients, and one level of nested differentiation for the gradient
//! penalty `(||grad_y D(y)||_2 - 1)^2`.

mod conv;
mod network;
mod tape;
mod tensor;

use thiserror::Error;

pub use conv::ConvGeom;
pub use network::{forward, BoundParams, Layer, LayerKind, Network};
pub use tape::{Tape, Var, NORM_FLOOR};
pub use tensor::{GradRecord, GradScope, ParamSet, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("tensor shape {shape:?} does not hold {len} values")]
    BadTensor { shape: Vec<usize>, len: usize },
    #[error("{context}: expected shape {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("loss must reduce to a scalar, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("duplicate parameter {0}")]
    DuplicateParam(String),
    #[error("empty batch")]
    EmptyBatch,
}

/// A loss evaluated on one example of type `E`.
pub trait ExampleLoss<E: ?Sized> {
    /// Records the loss of `example` on `tape`; must produce a one-element node.
    fn build(&self, tape: &mut Tape, params: &BoundParams, example: &E) -> Result<Var, GradError>;
}

impl<E: ?Sized, F> ExampleLoss<E> for F
where
    F: Fn(&mut Tape, &BoundParams, &E) -> Result<Var, GradError>,
{
    fn build(&self, tape: &mut Tape, params: &BoundParams, example: &E) -> Result<Var, GradError> {
        self(tape, params, example)
    }
}

/// Value and parameter gradient of a scalar expression built by `f`.
pub fn value_and_grad<F>(params: &ParamSet, scope: GradScope, f: F) -> Result<(f64, GradRecord), GradError>
where
    F: FnOnce(&mut Tape, &BoundParams) -> Result<Var, GradError>,
{
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let out = f(&mut tape, &bound)?;
    let grads = tape.grad(out, bound.vars())?;
    let record = GradRecord::new(grads.iter().map(|&g| tape.value(g).clone()).collect(), scope);
    Ok((tape.value(out).item(), record))
}

/// Gradient of `loss` on each example separately, in batch order.
pub fn per_example_grads<E, L>(params: &ParamSet, loss: &L, batch: &[E]) -> Result<Vec<GradRecord>, GradError>
where
    L: ExampleLoss<E> + ?Sized,
{
    batch
        .iter()
        .map(|example| {
            value_and_grad(params, GradScope::PerExample, |tape, bound| loss.build(tape, bound, example))
                .map(|(_, g)| g)
        })
        .collect()
}

/// Like [`per_example_grads`], also returning each example's loss value.
pub fn per_example_values_and_grads<E, L>(
    params: &ParamSet,
    loss: &L,
    batch: &[E],
) -> Result<Vec<(f64, GradRecord)>, GradError>
where
    L: ExampleLoss<E> + ?Sized,
{
    batch
        .iter()
        .map(|example| value_and_grad(params, GradScope::PerExample, |tape, bound| loss.build(tape, bound, example)))
        .collect()
}

/// Records `(||grad_y D(y)||_2 - 1)^2` for a single example `y: [1, ...]`.
///
/// The input gradient stays on the tape, so differentiating the result with
/// respect to the critic parameters is a double backward pass. A gradient
/// norm below [`NORM_FLOOR`] uses subgradient 0 and yields penalty 1.
pub fn gradient_penalty(tape: &mut Tape, critic: &Network, params: &BoundParams, y: Var) -> Result<Var, GradError> {
    let d = critic.apply(tape, params, y)?;
    if !tape.value(d).is_scalar() {
        return Err(GradError::NonScalarOutput(tape.shape(d).to_vec()));
    }
    let grad_y = tape.grad(d, &[y])?[0];
    let norm = tape.norm(grad_y);
    let centered = tape.shift(norm, -1.0);
    Ok(tape.square(centered))
}

/// Parameter gradient of the gradient-norm penalty of `critic` at `y`.
pub fn grad_of_grad_norm(critic: &ParamSet, net: &Network, y: &Tensor) -> Result<GradRecord, GradError> {
    let (_, g) = value_and_grad(critic, GradScope::PerExample, |tape, bound| {
        let y = tape.leaf(y.clone());
        gradient_penalty(tape, net, bound, y)
    })?;
    Ok(g)
}
