//! Parametric and stateless layers with explicit forward/backward passes.

mod activation;
mod batchnorm;
mod conv;
mod linear;
mod pool;

pub use activation::{relu_backward, relu_forward, relu_inplace};
pub use batchnorm::{BatchNorm, DEFAULT_EPS, DEFAULT_MOMENTUM};
pub use conv::Conv2d;
pub use linear::Linear;
pub use pool::{global_avg_pool_backward, global_avg_pool_forward, MaxPool};

use crate::tensor::Real;

/// What a trainable tensor is, so optimisers can treat groups differently.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    LinearWeight,
    LinearBias,
    BnGamma,
    BnBeta,
}

impl ParamKind {
    pub fn is_batch_norm(self) -> bool {
        matches!(self, ParamKind::BnGamma | ParamKind::BnBeta)
    }
}

/// Mutable view of one trainable tensor and its gradient accumulator.
pub struct ParamMut<'a, T> {
    pub name: &'a str,
    pub kind: ParamKind,
    pub value: &'a mut [T],
    pub grad: &'a mut [T],
}

/// Anything that owns trainable tensors.
pub trait Parameterized<T: Real> {
    /// Visit every trainable tensor in a fixed order.
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_, T>));

    fn zero_grad(&mut self) {
        self.visit_params("", &mut |p| p.grad.fill(T::zero()));
    }

    fn num_trainable(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |p| n += p.value.len());
        n
    }
}

impl<T: Real> Parameterized<T> for Conv2d<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_, T>)) {
        f(ParamMut {
            name: &format!("{prefix}weight"),
            kind: ParamKind::ConvWeight,
            value: self.weight.data_mut(),
            grad: self.grad.data_mut(),
        });
    }
}

impl<T: Real> Parameterized<T> for BatchNorm<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_, T>)) {
        f(ParamMut {
            name: &format!("{prefix}gamma"),
            kind: ParamKind::BnGamma,
            value: &mut self.gamma,
            grad: &mut self.grad_gamma,
        });
        f(ParamMut {
            name: &format!("{prefix}beta"),
            kind: ParamKind::BnBeta,
            value: &mut self.beta,
            grad: &mut self.grad_beta,
        });
    }
}

impl<T: Real> Parameterized<T> for Linear<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_, T>)) {
        f(ParamMut {
            name: &format!("{prefix}weight"),
            kind: ParamKind::LinearWeight,
            value: &mut self.weight,
            grad: &mut self.grad_weight,
        });
        f(ParamMut {
            name: &format!("{prefix}bias"),
            kind: ParamKind::LinearBias,
            value: &mut self.bias,
            grad: &mut self.grad_bias,
        });
    }
}
