use ndarray::{ArrayD, IxDyn};

use super::Real;

/// How the optimizer treats a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    /// Learned, subject to weight decay.
    Weight,
    /// Learned normalization affine or bias term; no weight decay.
    NoDecay,
    /// Persistent state that is saved but never optimized (running stats).
    Buffer,
}

/// A named-by-position tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
    pub role: ParamRole,
}

impl<T: Real> Param<T> {
    pub fn zeros(shape: &[usize], role: ParamRole) -> Self {
        Self::from_value(ArrayD::zeros(IxDyn(shape)), role)
    }

    pub fn filled(shape: &[usize], v: T, role: ParamRole) -> Self {
        Self::from_value(ArrayD::from_elem(IxDyn(shape), v), role)
    }

    pub fn from_value(value: ArrayD<T>, role: ParamRole) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad, role }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}
