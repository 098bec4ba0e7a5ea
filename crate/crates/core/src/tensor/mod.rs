//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: row-major `Vec`-backed tensors, a
//! [`Tape`] that records primitive operations during the forward pass and
//! replays them in reverse for gradients, and an [`AdamState`] optimizer.
//! There is no broadcasting beyond bias addition over the batch axis and no
//! view machinery; every operation materializes its output.
//!
//! Tensors are cheap handles (`Rc` + `RefCell`): cloning a `Tensor` aliases
//! the same storage, which is how parameters are shared between a model, its
//! optimizer, and a tape. Tapes are built and consumed on a single thread.

mod adam;
mod ops;
mod tape;

pub use adam::{clip_grad_norm, AdamState};
pub use tape::Tape;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

/// Element type of a tensor. `f32` is the training default; the gradient
/// checks run the identical code paths in `f64`.
pub trait Scalar: num_traits::Float + fmt::Debug + fmt::Display + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: shape {shape:?} does not describe {len} elements")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("{op}: index {index} out of range for size {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub(crate) struct TensorData<T> {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<T>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Vec<T>>,
}

/// Dense row-major tensor handle. Clones alias the same storage.
pub struct Tensor<T> {
    pub(crate) inner: Rc<RefCell<TensorData<T>>>,
}

impl<T> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Tensor<T> {
    fn from_parts(data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor {
            inner: Rc::new(RefCell::new(TensorData {
                shape,
                data,
                requires_grad,
                grad: None,
            })),
        }
    }

    /// Leaf tensor from raw row-major data.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::BadShape {
                op: "from_vec",
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self::from_parts(data, shape.to_vec(), false))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self::from_parts(vec![T::zero(); numel], shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel: usize = shape.iter().product();
        Self::from_parts(vec![value; numel], shape.to_vec(), false)
    }

    pub fn scalar_value(value: T) -> Self {
        Self::from_parts(vec![value], vec![1], false)
    }

    /// Trainable leaf: `requires_grad` is set so backward deposits adjoints.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self, TensorError> {
        let t = Self::from_vec(data, shape)?;
        t.inner.borrow_mut().requires_grad = true;
        Ok(t)
    }

    pub(crate) fn from_op(data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Self::from_parts(data, shape, requires_grad)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, requires_grad: bool) {
        self.inner.borrow_mut().requires_grad = requires_grad;
    }

    /// Copy of the tensor values.
    pub fn to_vec(&self) -> Vec<T> {
        self.inner.borrow().data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        let d = self.inner.borrow();
        assert_eq!(d.data.len(), 1, "item() on tensor of shape {:?}", d.shape);
        d.data[0]
    }

    /// Copy of the gradient, if one has been populated.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        let mut d = self.inner.borrow_mut();
        d.grad = None;
    }

    /// Overwrite the values in place, keeping the shape. Used by the
    /// optimizer and by checkpoint loading.
    pub fn set_data(&self, data: &[T]) -> Result<(), TensorError> {
        let mut d = self.inner.borrow_mut();
        if data.len() != d.data.len() {
            return Err(TensorError::BadShape {
                op: "set_data",
                shape: d.shape.clone(),
                len: data.len(),
            });
        }
        d.data.copy_from_slice(data);
        Ok(())
    }

    /// Value-identical leaf disconnected from any tape; gradients never flow
    /// back into the original through the detached copy.
    pub fn detach(&self) -> Tensor<T> {
        let d = self.inner.borrow();
        Tensor::from_parts(d.data.clone(), d.shape.clone(), false)
    }

    /// Whether two handles alias the same storage.
    pub fn same_storage(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn accumulate_grad(&self, delta: &[T]) {
        let mut d = self.inner.borrow_mut();
        match d.grad {
            Some(ref mut g) => {
                for (gi, &di) in g.iter_mut().zip(delta) {
                    *gi = *gi + di;
                }
            }
            None => d.grad = Some(delta.to_vec()),
        }
    }

    pub(crate) fn reset_grad_zero(&self) {
        let mut d = self.inner.borrow_mut();
        let n = d.data.len();
        d.grad = Some(vec![T::zero(); n]);
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = self.inner.borrow();
        write!(f, "Tensor{:?}", d.shape)?;
        if d.data.len() <= 8 {
            write!(f, " {:?}", d.data)
        } else {
            write!(f, " [{:?}, {:?}, ...]", d.data[0], d.data[1])
        }
    }
}

/// Row-wise softmax of a `rows x cols` matrix, max-subtracted for stability.
pub fn softmax_rows<T: Scalar>(logits: &[T], rows: usize, cols: usize) -> Vec<T> {
    assert_eq!(logits.len(), rows * cols);
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let mut max = row[0];
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        let orow = &mut out[r * cols..(r + 1) * cols];
        for (o, &v) in orow.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            sum = sum + e;
        }
        for o in orow.iter_mut() {
            *o = *o / sum;
        }
    }
    out
}
