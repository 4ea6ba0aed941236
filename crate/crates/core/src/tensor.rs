//! Dense f64 tensors with optional gradient storage.
//!
//! A `Tensor` is a cheap-to-clone handle onto shared storage. Values are
//! row-major. Gradients accumulate into `grad` during a tape's backward
//! pass; call [`Tensor::zero_grad`] between optimizer steps.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};

struct Inner {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Handle onto a shared dense array. Cloning shares storage.
#[derive(Clone)]
pub struct Tensor(Rc<RefCell<Inner>>);

impl Tensor {
    /// Constant tensor: participates in forward math but never receives a gradient.
    pub fn new(values: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        Self::build(values, shape, false)
    }

    /// Trainable leaf: `requires_grad` set, gradient populated by backward.
    pub fn param(values: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        Self::build(values, shape, true)
    }

    pub fn scalar(v: f64) -> Self {
        Self::build(vec![v], vec![1], false).expect("scalar shape is always valid")
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::build(vec![0.0; n], shape, false)
    }

    pub(crate) fn build(values: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::contract(format!(
                "shape {:?} implies {} values, got {}",
                shape,
                expected,
                values.len()
            )));
        }
        Ok(Tensor(Rc::new(RefCell::new(Inner {
            shape,
            values,
            requires_grad,
            grad: None,
        }))))
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn ndim(&self) -> usize {
        self.0.borrow().shape.len()
    }

    pub fn len(&self) -> usize {
        self.0.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows of a 2-D tensor (or 1 for 1-D).
    pub fn rows(&self) -> usize {
        let inner = self.0.borrow();
        if inner.shape.len() == 2 {
            inner.shape[0]
        } else {
            1
        }
    }

    /// Columns of a 2-D tensor, or the length of a 1-D one.
    pub fn cols(&self) -> usize {
        let inner = self.0.borrow();
        *inner.shape.last().unwrap_or(&0)
    }

    pub fn is_scalar(&self) -> bool {
        self.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        let inner = self.0.borrow();
        if inner.values.len() != 1 {
            return Err(Error::contract(format!(
                "item() requires a scalar, shape is {:?}",
                inner.shape
            )));
        }
        Ok(inner.values[0])
    }

    pub fn values(&self) -> Ref<'_, Vec<f64>> {
        Ref::map(self.0.borrow(), |inner| &inner.values)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.borrow().values.clone()
    }

    /// Overwrite values in place (same length required). Used by optimizers
    /// and finite-difference probes; never call between a forward pass and
    /// the matching backward pass.
    pub fn set_values(&self, values: &[f64]) -> Result<()> {
        let mut inner = self.0.borrow_mut();
        if inner.values.len() != values.len() {
            return Err(Error::contract(format!(
                "set_values length {} vs tensor length {}",
                values.len(),
                inner.values.len()
            )));
        }
        inner.values.copy_from_slice(values);
        Ok(())
    }

    pub fn value_at(&self, index: usize) -> Result<f64> {
        let inner = self.0.borrow();
        inner.values.get(index).copied().ok_or_else(|| {
            Error::contract(format!(
                "index {} out of range for length {}",
                index,
                inner.values.len()
            ))
        })
    }

    /// Overwrite one coordinate in place (finite-difference probe).
    pub fn set_value_at(&self, index: usize, value: f64) -> Result<()> {
        let mut inner = self.0.borrow_mut();
        if index >= inner.values.len() {
            return Err(Error::contract(format!(
                "index {} out of range for length {}",
                index,
                inner.values.len()
            )));
        }
        inner.values[index] = value;
        Ok(())
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.borrow().grad.clone()
    }

    /// Gradient, or zeros when backward never reached this tensor.
    pub fn grad_or_zeros(&self) -> Vec<f64> {
        let inner = self.0.borrow();
        inner
            .grad
            .clone()
            .unwrap_or_else(|| vec![0.0; inner.values.len()])
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    /// Accumulate a gradient contribution. Repeated calls add.
    pub(crate) fn accumulate_grad(&self, contribution: &[f64]) {
        let mut inner = self.0.borrow_mut();
        debug_assert_eq!(contribution.len(), inner.values.len());
        match &mut inner.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => inner.grad = Some(contribution.to_vec()),
        }
    }

    /// Seed the gradient of a scalar tensor (backward entry point).
    pub(crate) fn seed_grad(&self, value: f64) {
        let mut inner = self.0.borrow_mut();
        match &mut inner.grad {
            Some(g) => g[0] += value,
            None => inner.grad = Some(vec![value]),
        }
    }

    pub(crate) fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.0.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .field("values", &inner.values)
            .finish()
    }
}
