use std::cell::{Ref, RefCell};
use std::rc::Rc;

use super::{DiffError, Result};

struct Inner {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// A dense row-major f64 tensor behind a shared handle.
///
/// Cloning a `Tensor` clones the handle, not the storage: the tape keeps
/// handles to operation inputs/outputs, and gradient accumulation during the
/// backward sweep writes through them. Invariants: `values.len()` equals the
/// product of `shape`, and `grad`, when present, has the same length.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

impl Tensor {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(DiffError::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {:?} needs {} values, got {}", shape, n, values.len()),
            });
        }
        Ok(Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape: shape.to_vec(),
                values,
                requires_grad: false,
                grad: None,
            })),
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; n]).expect("consistent by construction")
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, vec![value; n]).expect("consistent by construction")
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::new(&[1], vec![value]).expect("consistent by construction")
    }

    /// A trainable leaf: `requires_grad` set from the start.
    pub fn param(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::new(shape, values)?;
        t.set_requires_grad(true);
        t
            .inner
            .borrow_mut()
            .grad = None;
        Ok(t)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().values.len()
    }

    /// Immutable view of the values. Holding this across an op call that
    /// writes to the same tensor would panic; scopes are kept short.
    pub fn values(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |i| i.values.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().values.clone()
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        assert!(inner.values.len() == 1, "item() on non-scalar tensor");
        inner.values[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, flag: bool) {
        self.inner.borrow_mut().requires_grad = flag;
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn has_grad(&self) -> bool {
        self.inner.borrow().grad.is_some()
    }

    pub fn clear_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// A value copy detached from any gradient bookkeeping.
    pub fn detach(&self) -> Tensor {
        let inner = self.inner.borrow();
        Tensor::new(&inner.shape, inner.values.clone()).expect("consistent by construction")
    }

    /// Overwrite values in place (same length required). Used by the
    /// optimizer, running statistics, and finite-difference probes.
    pub fn set_values(&self, values: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.values.len(), values.len(), "set_values length mismatch");
        inner.values.copy_from_slice(values);
    }

    pub fn set_value_at(&self, idx: usize, value: f64) {
        self.inner.borrow_mut().values[idx] = value;
    }

    pub fn value_at(&self, idx: usize) -> f64 {
        self.inner.borrow().values[idx]
    }

    /// Accumulate into the gradient buffer, allocating zeros on first use.
    pub(crate) fn accumulate_grad(&self, f: impl FnOnce(&mut [f64])) {
        let mut inner = self.inner.borrow_mut();
        if inner.grad.is_none() {
            inner.grad = Some(vec![0.0; inner.values.len()]);
        }
        f(inner.grad.as_mut().unwrap());
    }

    /// Mutate values in place through a closure (optimizer update path).
    pub(crate) fn update_values(&self, f: impl FnOnce(&mut [f64], Option<&[f64]>)) {
        let mut inner = self.inner.borrow_mut();
        let Inner { values, grad, .. } = &mut *inner;
        f(values, grad.as_deref());
    }

    #[cfg(test)]
    pub(crate) fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn debug_assert_finite(&self, op: &'static str) {
        debug_assert!(
            self.inner.borrow().values.iter().all(|v| v.is_finite()),
            "{op}: non-finite value in forward output"
        );
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={}, grad={})",
            inner.shape,
            inner.requires_grad,
            if inner.grad.is_some() { "yes" } else { "no" }
        )
    }
}
