//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The graph is define-by-run: every op that touches a gradient-requiring
//! tensor records its parents and a backward closure, and [`Tensor::backward`]
//! walks the graph once in reverse topological order. Tensors are immutable
//! once created; only leaf data (parameters) may be rewritten between graphs,
//! and gradient buffers are the single interior-mutable field used during a
//! backward pass.
//!
//! Precision is generic: `Tensor<f32>` for training throughput, `Tensor<f64>`
//! where finite-difference oracles need the headroom.

mod ops;
mod optim;
mod store;

pub mod gradcheck;

pub use ops::concat;
pub use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use store::{DType, ParamStore};

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

/// Errors raised by tensor construction, ops and the autograd contract.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: lhs {lhs:?}, rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?} for data of length {len}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("{op}: index {index} out of range {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarBackward(Vec<usize>),
    #[error("backward called twice on the same graph")]
    DoubleBackward,
    #[error("{0}")]
    Contract(String),
}

/// Floating point element type usable by the engine.
///
/// Random draws and schedule constants are produced in `f64` and converted,
/// so an `f32` run and an `f64` run consume identical random streams.
pub trait Scalar:
    num_traits::Float + std::iter::Sum + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    const DTYPE: DType;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static NO_GRAD_DEPTH: Cell<u32> = const { Cell::new(0) };
}

/// Runs `f` with graph recording disabled; ops inside produce detached
/// tensors. Used on every inference path.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Guard;
    impl Drop for Guard {
        fn drop(&mut self) {
            NO_GRAD_DEPTH.with(|d| d.set(d.get() - 1));
        }
    }
    NO_GRAD_DEPTH.with(|d| d.set(d.get() + 1));
    let _g = Guard;
    f()
}

fn grad_enabled() -> bool {
    NO_GRAD_DEPTH.with(|d| d.get()) == 0
}

/// Backward closure: receives the node it belongs to plus the upstream
/// gradient and returns one optional gradient buffer per parent.
type BackwardFn<F> = Box<dyn Fn(&Node<F>, &[F]) -> Vec<Option<Vec<F>>>>;

pub(crate) struct Node<F: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<F>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<F>>>,
    parents: Vec<Tensor<F>>,
    backward_fn: Option<BackwardFn<F>>,
    backward_done: Cell<bool>,
}

/// A dense n-dimensional tensor participating in a reverse-mode graph.
///
/// Cloning is cheap (reference-counted handle to the same node).
pub struct Tensor<F: Scalar>(Rc<Node<F>>);

impl<F: Scalar> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<F: Scalar> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<F: Scalar> Tensor<F> {
    fn new_node(
        shape: Vec<usize>,
        data: Vec<F>,
        requires_grad: bool,
        parents: Vec<Tensor<F>>,
        backward_fn: Option<BackwardFn<F>>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            requires_grad,
            grad: RefCell::new(None),
            parents,
            backward_fn,
            backward_done: Cell::new(false),
        }))
    }

    /// Result of an op: keeps the graph only when recording is on and some
    /// parent requires gradients.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<F>,
        parents: Vec<Tensor<F>>,
        backward_fn: impl Fn(&Node<F>, &[F]) -> Vec<Option<Vec<F>>> + 'static,
    ) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.0.requires_grad);
        if track {
            Self::new_node(shape, data, true, parents, Some(Box::new(backward_fn)))
        } else {
            Self::new_node(shape, data, false, Vec::new(), None)
        }
    }

    /// Leaf tensor from a flat buffer.
    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::InvalidShape {
                op: "from_vec",
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self::new_node(shape.to_vec(), data, false, Vec::new(), None))
    }

    /// Leaf parameter: participates in gradient accumulation.
    pub fn param(shape: &[usize], data: Vec<F>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::InvalidShape {
                op: "param",
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self::new_node(shape.to_vec(), data, true, Vec::new(), None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new_node(shape.to_vec(), vec![F::zero(); n], false, Vec::new(), None)
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Self::new_node(shape.to_vec(), vec![value; n], false, Vec::new(), None)
    }

    pub fn scalar(value: F) -> Self {
        Self::new_node(vec![], vec![value], false, Vec::new(), None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Borrow of the underlying flat buffer (row-major).
    pub fn data(&self) -> std::cell::Ref<'_, Vec<F>> {
        self.0.data.borrow()
    }

    pub fn data_clone(&self) -> Vec<F> {
        self.0.data.borrow().clone()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> F {
        assert!(self.numel() == 1, "item() on non-scalar tensor");
        self.0.data.borrow()[0]
    }

    /// Overwrites leaf data in place (optimizer updates, gradient checks).
    /// Panics on non-leaf tensors: graph intermediates are immutable.
    pub fn set_data(&self, new: &[F]) {
        assert!(
            self.0.backward_fn.is_none(),
            "set_data on a non-leaf tensor"
        );
        assert_eq!(new.len(), self.numel(), "set_data length mismatch");
        self.0.data.borrow_mut().copy_from_slice(new);
    }

    /// Accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<F>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.borrow().iter().all(|v| v.is_finite())
    }

    fn accumulate_grad(&self, delta: &[F]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(delta) {
                    *a = *a + *b;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Populates `grad` on every
    /// gradient-requiring tensor reachable through the graph. Calling it a
    /// second time on the same loss node is an error.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarBackward(self.0.shape.clone()));
        }
        if self.0.backward_done.get() {
            return Err(TensorError::DoubleBackward);
        }
        self.0.backward_done.set(true);

        // Iterative DFS post-order; reversed it is a topological order with
        // every consumer processed before its producer.
        let mut order: Vec<Tensor<F>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<F>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.0.id);
        while let Some((node, child_idx)) = stack.pop() {
            if child_idx < node.0.parents.len() {
                let parent = node.0.parents[child_idx].clone();
                stack.push((node, child_idx + 1));
                if parent.0.requires_grad && visited.insert(parent.0.id) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }

        self.accumulate_grad(&[F::one()]);
        for node in order.iter().rev() {
            let Some(backward_fn) = node.0.backward_fn.as_ref() else {
                continue;
            };
            let upstream = node
                .0
                .grad
                .borrow()
                .clone()
                .unwrap_or_else(|| vec![F::zero(); node.numel()]);
            let contributions = backward_fn(&node.0, &upstream);
            debug_assert_eq!(contributions.len(), node.0.parents.len());
            for (parent, contrib) in node.0.parents.iter().zip(contributions) {
                if let Some(c) = contrib {
                    debug_assert_eq!(c.len(), parent.numel());
                    if parent.0.requires_grad {
                        parent.accumulate_grad(&c);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests;
