//! Dense n-dimensional tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, cheaply clonable handle (`Arc` inside) over a
//! row-major value buffer plus an optional tape node describing the operation
//! that produced it. Calling [`backward`] on a scalar tensor walks the
//! recorded graph in reverse topological order and returns a [`Gradients`]
//! map from leaf tensor ids to gradient buffers.
//!
//! Two element types are supported: `f32` for training and `f64` for
//! gradient-check oracles.

mod autodiff;
mod check;
mod ops;

pub use autodiff::{backward, Gradients};
pub use check::finite_diff_gradient;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

/// Element type of a tensor: `f32` (training) or `f64` (gradient checks).
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;

    fn from_float(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("finite f64 convertible")
    }

    fn as_f64(self) -> f64 {
        <Self as num_traits::ToPrimitive>::to_f64(&self).expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
}

/// Unique identity of a tensor; gradient maps are keyed by it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(u64);

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

impl TensorId {
    fn fresh() -> Self {
        TensorId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// Backward rule of one recorded operation: maps the output gradient to one
/// gradient buffer per input (`None` for inputs that need no gradient).
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

/// Tape node: the operation that produced a tensor, its parents, and the
/// closure implementing its vector-Jacobian product.
pub(crate) struct TapeNode<T: Scalar> {
    pub(crate) op: &'static str,
    pub(crate) inputs: Vec<Tensor<T>>,
    pub(crate) backward: BackwardFn<T>,
}

struct Inner<T: Scalar> {
    id: TensorId,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    node: Option<TapeNode<T>>,
}

/// Dense row-major tensor (last index fastest). Immutable once created.
pub struct Tensor<T: Scalar> {
    inner: Arc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field(
                "op",
                &self.inner.node.as_ref().map(|n| n.op).unwrap_or("leaf"),
            )
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    /// Leaf tensor from raw data; `requires_grad = false`.
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self::new_leaf(shape, data, false))
    }

    /// Leaf tensor that participates in gradient computation (a parameter or
    /// a gradient-checked input).
    pub fn param(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        Ok(t.requires_grad(true))
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self::new_leaf(shape, vec![T::zero(); n], false)
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = numel(&shape);
        Self::new_leaf(shape, vec![value; n], false)
    }

    pub fn scalar(value: T) -> Self {
        Self::new_leaf(vec![], vec![value], false)
    }

    pub(crate) fn new_leaf(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        Tensor {
            inner: Arc::new(Inner {
                id: TensorId::fresh(),
                shape,
                data,
                requires_grad,
                node: None,
            }),
        }
    }

    pub(crate) fn from_node(
        shape: Vec<usize>,
        data: Vec<T>,
        node: Option<TapeNode<T>>,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: TensorId::fresh(),
                shape,
                data,
                requires_grad: node.is_some(),
                node,
            }),
        }
    }

    /// Returns a leaf copy of this tensor with the given `requires_grad`
    /// flag. Detaches from any recorded graph.
    pub fn requires_grad(&self, flag: bool) -> Self {
        Tensor {
            inner: Arc::new(Inner {
                id: TensorId::fresh(),
                shape: self.inner.shape.clone(),
                data: self.inner.data.clone(),
                requires_grad: flag,
                node: None,
            }),
        }
    }

    /// Leaf view of the same values, cut off from the graph.
    pub fn detach(&self) -> Self {
        self.requires_grad(false)
    }

    pub fn id(&self) -> TensorId {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn len(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.data.is_empty()
    }

    pub fn needs_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    pub(crate) fn node(&self) -> Option<&TapeNode<T>> {
        self.inner.node.as_ref()
    }

    /// Value of a scalar (or single-element) tensor.
    pub fn item(&self) -> Result<T> {
        if self.len() != 1 {
            return Err(Error::shape(format!(
                "item() requires a single-element tensor, shape is {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }

    /// Same shape, every element converted via f64.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self
            .inner
            .data
            .iter()
            .map(|v| U::from_float(v.as_f64()))
            .collect();
        Tensor::new_leaf(self.inner.shape.clone(), data, false)
    }

    /// Leaf copy with one coordinate displaced by `delta` (finite-difference
    /// probes). Keeps `requires_grad = false`.
    pub fn with_nudged(&self, index: usize, delta: T) -> Self {
        let mut data = self.inner.data.clone();
        data[index] = data[index] + delta;
        Self::new_leaf(self.inner.shape.clone(), data, false)
    }
}

/// Records a differentiable operation. If no input requires a gradient the
/// node is dropped and a plain value tensor is returned.
pub(crate) fn record<T: Scalar>(
    op: &'static str,
    inputs: &[&Tensor<T>],
    out_shape: Vec<usize>,
    out_data: Vec<T>,
    backward: impl Fn(&[T]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
) -> Tensor<T> {
    let any_grad = inputs.iter().any(|t| t.needs_grad());
    if !any_grad {
        return Tensor::new_leaf(out_shape, out_data, false);
    }
    let node = TapeNode {
        op,
        inputs: inputs.iter().map(|t| (*t).clone()).collect(),
        backward: Box::new(backward),
    };
    Tensor::from_node(out_shape, out_data, Some(node))
}

pub use ops::*;

#[cfg(test)]
mod tests;
