use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::rng::standard_normal;
use crate::tensor::{gemm, Op, Real, Shape, Tensor};

/// Fully connected layer `y = W x + b`. Inputs of shape `(n, c, h, w)` are
/// read as `n` flat vectors of length `c * h * w`; outputs are `(n, out, 1, 1)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Linear<T: Real = f64> {
    pub in_features: usize,
    pub out_features: usize,
    /// Row-major `[out][in]`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub grad_weight: Vec<T>,
    pub grad_bias: Vec<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(in_features: usize, out_features: usize) -> Result<Self> {
        if in_features == 0 || out_features == 0 {
            return Err(config_err!("linear layer needs positive sizes"));
        }
        Ok(Self {
            in_features,
            out_features,
            weight: vec![T::zero(); in_features * out_features],
            bias: vec![T::zero(); out_features],
            grad_weight: vec![T::zero(); in_features * out_features],
            grad_bias: vec![T::zero(); out_features],
        })
    }

    pub fn from_parts(weight: Vec<Vec<T>>, bias: Vec<T>) -> Result<Self> {
        let out = weight.len();
        let inp = weight.first().map_or(0, Vec::len);
        let mut l = Self::new(inp, out)?;
        if bias.len() != out || weight.iter().any(|r| r.len() != inp) {
            return Err(shape_err!("ragged linear weights"));
        }
        l.weight = weight.into_iter().flatten().collect();
        l.bias = bias;
        Ok(l)
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// He-normal weights, zero bias.
    pub fn init_he<R: Rng>(&mut self, rng: &mut R) {
        let std = (2.0 / self.in_features as f64).sqrt();
        for w in &mut self.weight {
            *w = T::of(std * standard_normal(rng));
        }
        self.bias.fill(T::zero());
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().sample() != self.in_features {
            return Err(shape_err!(
                "linear expects {} features, got {}",
                self.in_features,
                x.shape()
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let n = x.shape().n;
        let mut out = Vec::with_capacity(n * self.out_features);
        for _ in 0..n {
            out.extend_from_slice(&self.bias);
        }
        gemm(n, self.in_features, self.out_features, x.data(), Op::N, &self.weight, Op::T, T::one(), &mut out);
        Tensor::from_vec(Shape::new(n, self.out_features, 1, 1), out)
    }

    /// `(grad_x, grad_weight, grad_bias)`.
    pub fn backward(&self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
        self.check(x)?;
        let n = x.shape().n;
        if grad_out.shape() != Shape::new(n, self.out_features, 1, 1) {
            return Err(shape_err!("linear grad_out shape {}", grad_out.shape()));
        }
        let mut gx = x.zeros_like();
        gemm(n, self.out_features, self.in_features, grad_out.data(), Op::N, &self.weight, Op::N, T::zero(), gx.data_mut());
        let mut gw = vec![T::zero(); self.weight.len()];
        gemm(self.out_features, n, self.in_features, grad_out.data(), Op::T, x.data(), Op::N, T::zero(), &mut gw);
        let mut gb = vec![T::zero(); self.out_features];
        for row in grad_out.data().chunks(self.out_features) {
            for (b, &g) in gb.iter_mut().zip(row) {
                *b += g;
            }
        }
        Ok((gx, gw, gb))
    }

    pub fn backward_acc(&mut self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (gx, gw, gb) = self.backward(x, grad_out)?;
        for (a, b) in self.grad_weight.iter_mut().zip(gw) {
            *a += b;
        }
        for (a, b) in self.grad_bias.iter_mut().zip(gb) {
            *a += b;
        }
        Ok(gx)
    }
}
