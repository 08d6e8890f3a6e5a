//! Dense f32 tensor with optional gradient buffer.
//!
//! Storage is row-major and contiguous; there are no views or strides beyond
//! whole-buffer reshape. A `Tensor` is a cheap handle (`Rc`) so that the tape
//! can hold the tensors an op touched; the numeric payload itself is never
//! shared between logically distinct tensors.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

pub(crate) struct TensorInner {
    pub id: u64,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

/// Handle to a dense tensor. Clones share the same buffer identity.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<TensorInner>>,
}

fn next_id() -> u64 {
    use std::cell::Cell;
    thread_local! {
        static NEXT: Cell<u64> = const { Cell::new(1) };
    }
    NEXT.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

impl Tensor {
    /// Build a tensor from raw data. `data.len()` must equal `product(shape)`.
    pub fn from_vec(data: Vec<f32>, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            inner: Rc::new(RefCell::new(TensorInner {
                id: next_id(),
                shape: shape.to_vec(),
                data,
                requires_grad: false,
                grad: None,
            })),
        }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(vec![0.0; shape.iter().product()], shape)
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        Tensor::from_vec(vec![value; shape.iter().product()], shape)
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::from_vec(vec![value], &[1])
    }

    /// Gaussian-initialized tensor with the given standard deviation.
    pub fn randn<R: Rng>(shape: &[usize], std: f32, rng: &mut R) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|_| {
                let z: f32 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Tensor::from_vec(data, shape)
    }

    /// Gaussian-initialized trainable parameter.
    pub fn param<R: Rng>(shape: &[usize], std: f32, rng: &mut R) -> Tensor {
        Tensor::randn(shape, std, rng).requires_grad(true)
    }

    pub fn requires_grad(self, flag: bool) -> Tensor {
        self.inner.borrow_mut().requires_grad = flag;
        self
    }

    pub fn is_tracked(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    /// Borrow the raw data slice.
    pub fn data(&self) -> Ref<'_, [f32]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.borrow().data.clone()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f32 {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item() on non-scalar tensor");
        inner.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Copy of the data as a fresh untracked leaf.
    pub fn detach(&self) -> Tensor {
        Tensor::from_vec(self.to_vec(), &self.shape())
    }

    /// Contiguous reinterpretation of the buffer under a new shape.
    /// Data is copied; gradients do not flow through (use `ops::reshape`
    /// for a differentiable reshape).
    pub fn reshaped(&self, shape: &[usize]) -> Tensor {
        Tensor::from_vec(self.to_vec(), shape)
    }

    pub(crate) fn accumulate_grad(&self, g: &[f32]) {
        let mut inner = self.inner.borrow_mut();
        debug_assert_eq!(g.len(), inner.data.len(), "gradient length mismatch");
        match &mut inner.grad {
            Some(buf) => {
                for (b, gi) in buf.iter_mut().zip(g) {
                    *b += gi;
                }
            }
            None => inner.grad = Some(g.to_vec()),
        }
    }

    /// In-place update of the payload; the only sanctioned mutation after
    /// construction (optimizer steps, codebook pinning).
    pub fn update_data(&self, f: impl FnOnce(&mut [f32])) {
        let mut inner = self.inner.borrow_mut();
        f(&mut inner.data);
    }

    /// Overwrite the payload with `data` (same length required).
    pub fn copy_from(&self, data: &[f32]) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(data.len(), inner.data.len(), "copy_from length mismatch");
        inner.data.copy_from_slice(data);
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            inner.id, inner.shape, inner.requires_grad
        )
    }
}

/// Debug-build check that a forward op produced only finite values.
#[inline]
pub(crate) fn debug_check_finite(op: &'static str, data: &[f32]) {
    if cfg!(debug_assertions) {
        for (i, v) in data.iter().enumerate() {
            assert!(
                v.is_finite(),
                "non-finite value {v} at index {i} in output of `{op}`"
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_data_agree() {
        let t = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        assert_eq!(t.shape(), vec![2, 3]);
        assert_eq!(t.numel(), 6);
        assert_eq!(t.to_vec(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    #[should_panic(expected = "does not match shape")]
    fn mismatched_shape_panics() {
        let _ = Tensor::from_vec(vec![1.0, 2.0], &[3]);
    }

    #[test]
    fn grad_accumulates() {
        let t = Tensor::zeros(&[3]).requires_grad(true);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        assert_eq!(t.grad().unwrap(), vec![2.0, 3.0, 4.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn detach_is_a_fresh_leaf() {
        let t = Tensor::from_vec(vec![1.0, 2.0], &[2]).requires_grad(true);
        let d = t.detach();
        assert!(!d.is_tracked());
        assert_ne!(t.id(), d.id());
        assert_eq!(d.to_vec(), t.to_vec());
    }
}
