//! Dense f64 tensors participating in a reverse-mode autodiff graph.
//!
//! Tensors are cheap handles (`Rc`) onto row-major buffers. Each non-leaf
//! tensor records the operation that produced it together with handles to
//! its parents, which is all the backward pass needs. Graph construction
//! and backward are single-threaded; determinism is bitwise.

mod adamw;
mod backward;
mod conv;
mod gradcheck;
mod ops;
#[cfg(test)]
#[path = "tests.rs"]
mod engine_tests;

pub use adamw::{cosine_lr, AdamW};
pub use backward::backward;
pub use conv::conv3d;
pub use gradcheck::{grad_check, grad_check_above, grad_check_sampled};
pub use ops::{concat, InterpMode};

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Run `f` without recording autodiff graph nodes (inference mode).
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    let out = f();
    GRAD_ENABLED.with(|c| c.set(prev));
    out
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Operation that produced a tensor, holding handles to its parents.
#[derive(Clone)]
pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Neg(Tensor),
    AddScalar(Tensor),
    MulScalar(Tensor, f64),
    Sigmoid(Tensor),
    Relu(Tensor),
    Softplus(Tensor),
    Exp(Tensor),
    Log(Tensor),
    Conv3d { input: Tensor, weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize },
    InterpTrilinear { input: Tensor, dims: [usize; 3] },
    InterpNearest { input: Tensor, dims: [usize; 3] },
    Sum { input: Tensor, axes: Vec<usize>, keepdims: bool },
    Mean { input: Tensor, axes: Vec<usize>, keepdims: bool },
    Var { input: Tensor, axes: Vec<usize>, keepdims: bool },
    Min { input: Tensor, axes: Vec<usize>, keepdims: bool },
    Max { input: Tensor, axes: Vec<usize>, keepdims: bool },
    ChannelL2Norm(Tensor),
    ChannelSoftmax(Tensor),
    /// Per-sample min-max normalization over all non-batch axes.
    MinMaxNorm { input: Tensor, eps: f64 },
    Concat { parts: Vec<Tensor>, axis: usize },
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![a, b],
            Op::Neg(a)
            | Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Softplus(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::ChannelL2Norm(a)
            | Op::ChannelSoftmax(a) => vec![a],
            Op::Conv3d { input, weight, bias, .. } => {
                let mut p = vec![input, weight];
                if let Some(b) = bias {
                    p.push(b);
                }
                p
            }
            Op::InterpTrilinear { input, .. } | Op::InterpNearest { input, .. } => vec![input],
            Op::Sum { input, .. }
            | Op::Mean { input, .. }
            | Op::Var { input, .. }
            | Op::Min { input, .. }
            | Op::Max { input, .. }
            | Op::MinMaxNorm { input, .. } => vec![input],
            Op::Concat { parts, .. } => parts.iter().collect(),
        }
    }
}

pub(crate) struct Inner {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: RefCell<Vec<f64>>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: RefCell<Option<Vec<f64>>>,
    pub(crate) op: Option<Op>,
}

/// Handle onto a shared tensor buffer. Cloning is O(1).
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            self.inner.id,
            self.inner.shape,
            self.inner.requires_grad
        )
    }
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Option<Op>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                op,
            }),
        }
    }

    /// Constant leaf (never accumulates grad).
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} expects {} elements, got {}", shape, shape.iter().product::<usize>(), data.len()),
            ));
        }
        Ok(Tensor::build(shape.to_vec(), data, false, None))
    }

    /// Trainable leaf.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(
                "param",
                format!("shape {:?} expects {} elements, got {}", shape, shape.iter().product::<usize>(), data.len()),
            ));
        }
        Ok(Tensor::build(shape.to_vec(), data, true, None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::build(shape.to_vec(), vec![0.0; n], false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::build(shape.to_vec(), vec![value; n], false, None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::build(vec![1], vec![value], false, None)
    }

    /// Scalar trainable parameter (shape `[1]`).
    pub fn scalar_param(value: f64) -> Tensor {
        Tensor::build(vec![1], vec![value], true, None)
    }

    pub(crate) fn result_of(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Tensor {
        let track = grad_enabled() && op.parents().iter().any(|p| p.inner.requires_grad);
        if track {
            Tensor::build(shape, data, true, Some(op))
        } else {
            Tensor::build(shape, data, false, None)
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.op.is_none()
    }

    /// Copy of the underlying buffer.
    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.inner.data.borrow()[0]
    }

    pub fn with_data<T>(&self, f: impl FnOnce(&[f64]) -> T) -> T {
        f(&self.inner.data.borrow())
    }

    /// Overwrite the buffer in place (parameter updates).
    pub fn set_data(&self, values: &[f64]) {
        let mut d = self.inner.data.borrow_mut();
        debug_assert_eq!(d.len(), values.len());
        d.copy_from_slice(values);
    }

    pub fn map_data(&self, f: impl FnMut(&mut f64)) {
        self.inner.data.borrow_mut().iter_mut().for_each(f);
    }

    /// Accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Detached constant copy of this tensor's current values.
    pub fn detach(&self) -> Tensor {
        Tensor::build(self.inner.shape.clone(), self.to_vec(), false, None)
    }

    /// Bitwise equality of shapes and payloads.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
            && self
                .inner
                .data
                .borrow()
                .iter()
                .zip(other.inner.data.borrow().iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
