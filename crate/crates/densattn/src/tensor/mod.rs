//! Dense N×C×H×W tensors with reverse-mode automatic differentiation.
//!
//! The tensor core is deliberately small: double-precision contiguous
//! buffers, a per-forward-pass gradient tape that is consumed by
//! [`backward`], and exactly the primitive operations the rest of the
//! crate needs (convolution, pooling, broadcast arithmetic, axis
//! reductions). Values are bit-deterministic: every operation accumulates
//! in a fixed order, so identical inputs produce identical outputs across
//! runs and thread counts.

mod autograd;
mod conv;
mod gradcheck;
mod ops;
mod store;

pub use autograd::{backward, no_grad};
pub use gradcheck::grad_check;
pub use ops::{gap, mean_var, spatial_softmax, Axes, PoolKind};
pub use store::ParamStore;

use std::cell::{Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Shape of a 4-D tensor: batch, channels, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    /// Flat index of (n, c, h, w) in row-major order.
    #[inline(always)]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    /// Resulting shape when broadcasting against `other` (each dim equal or 1).
    pub fn broadcast_with(&self, other: &Shape, op: &'static str) -> Result<Shape> {
        let a = self.dims();
        let b = other.dims();
        let mut out = [0usize; 4];
        for (i, name) in ["N", "C", "H", "W"].iter().enumerate() {
            if a[i] == b[i] || a[i] == 1 || b[i] == 1 {
                out[i] = a[i].max(b[i]);
            } else {
                return Err(Error::shape(
                    op,
                    format!(
                        "dim {name} incompatible for broadcast: {} vs {} (shapes {self} and {other})",
                        a[i], b[i]
                    ),
                ));
            }
        }
        Ok(Shape::new(out[0], out[1], out[2], out[3]))
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) struct Inner {
    pub(crate) id: u64,
    pub(crate) shape: Shape,
    /// Mutated only through `ParamStore::apply_update`; every op treats
    /// tensor data as immutable.
    pub(crate) data: RefCell<Vec<f64>>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: RefCell<Option<Vec<f64>>>,
    /// Backward node; consumed (taken) during `backward`, which discards
    /// the tape.
    pub(crate) node: RefCell<Option<autograd::Node>>,
}

/// A dense 4-D tensor. Cloning is cheap (shared buffer).
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(shape={}, requires_grad={})",
            self.shape(),
            self.requires_grad()
        )
    }
}

impl Tensor {
    pub(crate) fn from_parts(
        shape: Shape,
        data: Vec<f64>,
        requires_grad: bool,
        node: Option<autograd::Node>,
    ) -> Tensor {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                node: RefCell::new(node),
            }),
        }
    }

    /// Leaf tensor from raw data. Errors if the length does not match the
    /// shape or any element is non-finite.
    pub fn from_data(shape: Shape, data: Vec<f64>) -> Result<Tensor> {
        if data.len() != shape.numel() {
            return Err(Error::shape(
                "from_data",
                format!("shape {shape} implies {} elements, got {}", shape.numel(), data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "from_data",
                format!("non-finite element at flat index {pos}"),
            ));
        }
        Ok(Tensor::from_parts(shape, data, false, None))
    }

    pub fn zeros(shape: Shape) -> Tensor {
        Tensor::from_parts(shape, vec![0.0; shape.numel()], false, None)
    }

    pub fn full(shape: Shape, value: f64) -> Tensor {
        Tensor::from_parts(shape, vec![value; shape.numel()], false, None)
    }

    /// Scalar tensor of shape 1×1×1×1.
    pub fn scalar(value: f64) -> Tensor {
        Tensor::full(Shape::new(1, 1, 1, 1), value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Tensor {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor::from_parts(shape, data, false, None)
    }

    /// Mark this leaf as requiring a gradient, returning a fresh leaf
    /// sharing no graph history.
    pub fn requires_grad_leaf(&self) -> Tensor {
        Tensor::from_parts(self.shape(), self.to_vec(), true, None)
    }

    /// Copy of this tensor cut off from the tape.
    pub fn detach(&self) -> Tensor {
        Tensor::from_parts(self.shape(), self.to_vec(), false, None)
    }

    pub fn shape(&self) -> Shape {
        self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::invalid(
                "item",
                format!("tensor has {} elements, expected 1", self.numel()),
            ));
        }
        Ok(self.inner.data.borrow()[0])
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        let idx = self.shape().index(n, c, h, w);
        self.inner.data.borrow()[idx]
    }

    /// Accumulated gradient (same shape as data), if backward has run.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub fn is_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_index_is_row_major() {
        let s = Shape::new(2, 3, 4, 5);
        assert_eq!(s.index(0, 0, 0, 0), 0);
        assert_eq!(s.index(0, 0, 0, 1), 1);
        assert_eq!(s.index(0, 0, 1, 0), 5);
        assert_eq!(s.index(0, 1, 0, 0), 20);
        assert_eq!(s.index(1, 0, 0, 0), 60);
        assert_eq!(s.numel(), 120);
    }

    #[test]
    fn from_data_validates_length_and_finiteness() {
        let s = Shape::new(1, 1, 2, 2);
        assert!(Tensor::from_data(s, vec![1.0; 3]).is_err());
        assert!(Tensor::from_data(s, vec![1.0, 2.0, f64::NAN, 4.0]).is_err());
        assert!(Tensor::from_data(s, vec![1.0; 4]).is_ok());
    }

    #[test]
    fn broadcast_shapes() {
        let a = Shape::new(2, 4, 3, 3);
        let b = Shape::new(2, 4, 1, 1);
        assert_eq!(a.broadcast_with(&b, "mul").unwrap(), a);
        let c = Shape::new(2, 3, 3, 3);
        assert!(a.broadcast_with(&c, "mul").is_err());
    }
}
