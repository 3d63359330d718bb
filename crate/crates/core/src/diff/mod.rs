//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every operation on a tensor that requires gradients records a node in an
//! expression graph. [`gradient`] walks that graph backwards. The adjoint of
//! each primitive is itself written in terms of recorded primitives, so with
//! `create_graph = true` the returned gradients are ordinary graph nodes and
//! can be differentiated again. That is what lets an outer loss see through an
//! inner gradient-descent step.
//!
//! Recording is controlled per thread: see [`no_grad`] and [`enable_grad`].
//!
//! ```
//! use mnbr::diff::{gradient, Tensor};
//!
//! let x = Tensor::scalar(2.0).requires_grad();
//! let y = x.mul(&x).unwrap().mul(&x).unwrap(); // x^3
//! let dy = gradient(&y, &[x.clone()], true).unwrap().remove(0);
//! let d2y = gradient(&dy, &[x.clone()], false).unwrap().remove(0);
//! assert_eq!(dy.item(), 12.0);
//! assert_eq!(d2y.item(), 12.0);
//! ```

mod backward;
mod ops;

use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

pub use backward::gradient;
pub(crate) use ops::Op;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Restores the previous recording mode when dropped.
#[must_use = "recording mode reverts as soon as the guard is dropped"]
pub struct GradModeGuard {
    prev: bool,
}

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

fn set_grad_mode(enabled: bool) -> GradModeGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
    GradModeGuard { prev }
}

/// Stop recording operations on this thread until the guard is dropped.
pub fn no_grad() -> GradModeGuard {
    set_grad_mode(false)
}

/// Resume recording operations on this thread until the guard is dropped.
pub fn enable_grad() -> GradModeGuard {
    set_grad_mode(true)
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Option<Op>,
    requires_grad: bool,
}

/// Dense row-major tensor. Cloning is cheap: values are shared and immutable.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl Tensor {
    fn from_parts(data: Vec<f64>, shape: Vec<usize>, op: Option<Op>, requires_grad: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            op,
            requires_grad,
        }))
    }

    /// Result of a primitive. Recorded only when recording is on and some
    /// parent requires gradients.
    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, op: Op) -> Self {
        if is_grad_enabled() && op.parents().iter().any(|p| p.requires_grad_flag()) {
            Tensor::from_parts(data, shape, Some(op), true)
        } else {
            Tensor::from_parts(data, shape, None, false)
        }
    }

    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor::from_parts(data, shape.to_vec(), None, false))
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(vec![value], vec![], None, false)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::from_parts(data, vec![n], None, false)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(data, &[rows, cols])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(vec![value; n], shape.to_vec(), None, false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::from_parts(data, vec![n, n], None, false)
    }

    /// A fresh leaf with the same values that gradients can be taken against.
    pub fn requires_grad(&self) -> Tensor {
        Tensor::from_parts(self.0.data.clone(), self.0.shape.clone(), None, true)
    }

    /// A fresh constant leaf with the same values.
    pub fn detach(&self) -> Tensor {
        Tensor::from_parts(self.0.data.clone(), self.0.shape.clone(), None, false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    /// The single value of a one-element tensor.
    ///
    /// Panics if the tensor has more than one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    pub fn requires_grad_flag(&self) -> bool {
        self.0.requires_grad
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    /// Row `i` of a matrix, as plain values.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.0.shape[1];
        &self.0.data[i * cols..(i + 1) * cols]
    }

    pub(crate) fn id(&self) -> u64 {
        self.0.id
    }

    pub(crate) fn op(&self) -> Option<&Op> {
        self.0.op.as_ref()
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.0.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::invalid(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("data", &self.0.data)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}
