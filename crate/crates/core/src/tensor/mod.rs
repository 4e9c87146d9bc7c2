//! Dense tensors with a recorded computation graph.
//!
//! Every tensor that (transitively) depends on a leaf created with
//! `requires_grad` keeps a reference to the primitive that produced it and
//! to that primitive's inputs. [`grad`] walks this graph in reverse. When it
//! is asked to `build_graph`, the backward rules are themselves evaluated with
//! recording switched on, so the returned gradients are ordinary graph nodes
//! and can be differentiated again. This is what lets the distiller push the
//! matching loss back through unrolled SGD steps of a student network.
//!
//! Graphs are thread-local (`Rc` based): build and differentiate a graph on
//! one thread, move plain `Vec`s between threads.

mod autograd;
mod functional;
mod kernels;
mod ops;

use std::cell::Cell;
use std::fmt;
use std::iter::Sum;
use std::rc::Rc;

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub use autograd::{grad, no_grad, with_grad_mode};
pub use functional::one_hot;
pub use kernels::ResamplePlan;

pub(crate) use ops::Op;

/// Scalar element type of a tensor: `f32` for production runs, `f64` for
/// oracle comparisons.
pub trait Element:
    Float + FromPrimitive + ToPrimitive + fmt::Debug + fmt::Display + Default + Send + Sync + Sum + 'static
{
    /// Lossless-enough conversion from an `f64` literal.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Element for f32 {}
impl Element for f64 {}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

pub(crate) fn set_grad_enabled(on: bool) -> bool {
    GRAD_ENABLED.with(|c| c.replace(on))
}

pub(crate) struct Node<T: Element> {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<T>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<T>,
}

impl<T: Element> Drop for Node<T> {
    // Unrolled graphs form long chains; dropping them recursively would
    // overflow the stack.
    fn drop(&mut self) {
        let mut pending = self.op.take_inputs();
        while let Some(t) = pending.pop() {
            if let Ok(mut node) = Rc::try_unwrap(t.0) {
                pending.extend(node.op.take_inputs());
            }
        }
    }
}

/// An immutable n-dimensional array, possibly attached to a computation graph.
///
/// Cloning is cheap (reference counted). A scalar has shape `[]`.
#[derive(Clone)]
pub struct Tensor<T: Element>(pub(crate) Rc<Node<T>>);

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &self.0.data)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tensor<T> {
    fn from_parts(data: Vec<T>, shape: Vec<usize>, requires_grad: bool, op: Op<T>) -> Self {
        debug_assert_eq!(data.len(), numel(&shape));
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad,
            op,
        }))
    }

    /// Constant tensor; gradients never flow into it.
    pub fn new(data: Vec<T>, shape: &[usize]) -> crate::Result<Self> {
        if data.len() != numel(shape) {
            return Err(crate::Error::Shape(format!(
                "{} elements do not fill shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self::from_parts(data, shape.to_vec(), false, Op::Leaf))
    }

    /// Leaf tensor that gradients can be taken with respect to.
    pub fn param(data: Vec<T>, shape: &[usize]) -> crate::Result<Self> {
        let t = Self::new(data, shape)?;
        Ok(t.into_param())
    }

    pub fn scalar(v: T) -> Self {
        Self::from_parts(vec![v], Vec::new(), false, Op::Leaf)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(vec![T::zero(); numel(shape)], shape.to_vec(), false, Op::Leaf)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::from_parts(vec![v; numel(shape)], shape.to_vec(), false, Op::Leaf)
    }

    fn into_param(self) -> Self {
        match Rc::try_unwrap(self.0) {
            Ok(mut node) => {
                let data = std::mem::take(&mut node.data);
                let shape = std::mem::take(&mut node.shape);
                Self::from_parts(data, shape, true, Op::Leaf)
            }
            Err(rc) => Self::from_parts(rc.data.clone(), rc.shape.clone(), true, Op::Leaf),
        }
    }

    /// Same values, cut off from the graph.
    pub fn detach(&self) -> Self {
        Self::from_parts(self.0.data.clone(), self.0.shape.clone(), false, Op::Leaf)
    }

    /// Same values as a fresh leaf that requires grad.
    pub fn detach_param(&self) -> Self {
        Self::from_parts(self.0.data.clone(), self.0.shape.clone(), true, Op::Leaf)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> crate::Result<T> {
        if self.numel() != 1 {
            return Err(crate::Error::Shape(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.0.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }
}
