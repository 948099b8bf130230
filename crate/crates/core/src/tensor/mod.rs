//! Dense f64 tensors and reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain shape + row-major buffer value type. Gradient
//! bookkeeping happens on a [`Tape`]: a forward pass records one node per
//! produced value, [`Tape::backward`] walks the record in reverse once, and
//! the caller pulls gradients out by node id. Tapes are single-use; training
//! loops build a fresh tape per minibatch.

mod adam;
mod eval;
mod gradcheck;
pub(crate) mod kernels;
mod tape;

#[cfg(test)]
mod reference;

pub use adam::{optimizer_step, AdamState};
pub use eval::{
    argmax_rows, assert_all_finite, eval_activation, eval_bce, eval_conv2d, eval_deconv2d,
    eval_dense, eval_softmax_cross_entropy, eval_sse,
};
pub use gradcheck::{compare_gradients, grad_check, numeric_gradients};
pub use tape::{Activation, Tape, ValueId};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("tape already consumed by a previous backward call")]
    TapeConsumed,
    #[error("parameter {index} has no gradient; run backward first")]
    MissingGradient { index: usize },
    #[error("optimizer state tracks {expected} parameters, got {actual}")]
    OptimizerShape { expected: usize, actual: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}

/// Number of elements implied by a shape. The empty shape is a scalar.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major f64 tensor. `grad` is populated by training-loop glue after a
/// backward pass and consumed by the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            data: vec![0.0; numel(shape)],
            shape: shape.to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            data: vec![value; numel(shape)],
            shape: shape.to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != numel(shape) {
            return Err(TensorError::ShapeMismatch {
                op: "from_vec",
                details: format!("shape {:?} implies {} elements, got {}", shape, numel(shape), data.len()),
            });
        }
        Ok(Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None })
    }

    /// Scalar convenience constructor (shape `[1]`).
    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Copies the given leading-axis rows into a new tensor, in order.
    /// Indices may repeat; each must be in range.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor, TensorError> {
        if self.shape.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "gather_rows",
                details: "scalar tensors have no rows".to_string(),
            });
        }
        let rows = self.shape[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::ShapeMismatch {
                op: "gather_rows",
                details: format!("row {bad} out of range for {rows} rows"),
            });
        }
        let row: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor::from_vec(&shape, data)
    }

    /// Same buffer under a new shape with equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        if numel(shape) != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                details: format!("cannot view {:?} ({} elements) as {:?}", self.shape, self.data.len(), shape),
            });
        }
        let mut out = self.clone();
        out.shape = shape.to_vec();
        Ok(out)
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the stored gradient, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }
}

/// Serializable description of a tensor's extent, used by the weight container.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorShape(pub Vec<usize>);
