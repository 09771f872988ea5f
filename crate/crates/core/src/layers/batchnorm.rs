use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::tensor::{Real, Tensor};
use crate::Mode;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalisation.
///
/// Train mode normalises with the biased batch variance and folds the batch
/// statistics into the running estimates as
/// `r <- (1 - momentum) * r + momentum * batch`. The running variance uses
/// the same biased estimator. Eval mode reads the running estimates only.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct BatchNorm<T: Real = f64> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub grad_gamma: Vec<T>,
    pub grad_beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: f64,
    pub momentum: f64,
    /// Number of train-mode forwards folded into the running estimates.
    pub updates: u64,
    #[serde(skip)]
    cache: Option<Cache<T>>,
}

#[derive(Clone, Debug)]
struct Cache<T: Real> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Result<Self> {
        Self::with_params(channels, DEFAULT_EPS, DEFAULT_MOMENTUM)
    }

    pub fn with_params(channels: usize, eps: f64, momentum: f64) -> Result<Self> {
        if channels == 0 {
            return Err(config_err!("batch norm needs at least one channel"));
        }
        if !(eps > 0.0) {
            return Err(config_err!("batch norm epsilon must be positive, got {eps}"));
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(config_err!("batch norm momentum {momentum} outside [0, 1]"));
        }
        Ok(Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            grad_gamma: vec![T::zero(); channels],
            grad_beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps,
            momentum,
            updates: 0,
            cache: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels()
    }

    /// Install running estimates directly (e.g. from a checkpoint or a
    /// calibration pass) and mark them as initialised.
    pub fn set_running(&mut self, mean: Vec<T>, var: Vec<T>) -> Result<()> {
        if mean.len() != self.channels() || var.len() != self.channels() {
            return Err(shape_err!("running stats length mismatch"));
        }
        if var.iter().any(|v| *v < T::zero()) {
            return Err(config_err!("running variance must be non-negative"));
        }
        self.running_mean = mean;
        self.running_var = var;
        self.updates = self.updates.max(1);
        Ok(())
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().c != self.channels() {
            return Err(shape_err!(
                "batch norm over {} channels got input {}",
                self.channels(),
                x.shape()
            ));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Train => self.forward_train(x),
            Mode::Eval => self.forward_eval(x),
        }
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let (mean, var) = x.moments();
        let eps = T::of(self.eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let s = x.shape();
        let mut xhat = x.clone();
        let mut out = x.clone();
        for i in 0..s.n {
            for j in 0..s.c {
                let (mu, is, g, b) = (mean[j], inv_std[j], self.gamma[j], self.beta[j]);
                for (h, o) in xhat.plane_mut(i, j).iter_mut().zip(out.plane_mut(i, j)) {
                    *h = (*h - mu) * is;
                    *o = g * *h + b;
                }
            }
        }
        let m = T::of(self.momentum);
        for j in 0..s.c {
            self.running_mean[j] = (T::one() - m) * self.running_mean[j] + m * mean[j];
            self.running_var[j] = (T::one() - m) * self.running_var[j] + m * var[j];
        }
        self.updates += 1;
        self.cache = Some(Cache { xhat, inv_std });
        Ok(out)
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        if self.updates == 0 {
            return Err(Error::State(
                "batch norm evaluated before its running statistics were initialised".into(),
            ));
        }
        let eps = T::of(self.eps);
        let s = x.shape();
        let mut out = x.clone();
        for i in 0..s.n {
            for j in 0..s.c {
                let is = T::one() / (self.running_var[j] + eps).sqrt();
                let (mu, g, b) = (self.running_mean[j], self.gamma[j], self.beta[j]);
                for o in out.plane_mut(i, j) {
                    *o = g * (*o - mu) * is + b;
                }
            }
        }
        Ok(out)
    }

    /// Train-mode gradients `(grad_x, grad_gamma, grad_beta)` using the
    /// statistics cached by the last [`forward_train`](Self::forward_train).
    pub fn backward(&self, grad_out: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
        let cache = self.cache.as_ref().ok_or_else(|| {
            Error::State("batch norm backward called without a cached train forward".into())
        })?;
        if grad_out.shape() != cache.xhat.shape() {
            return Err(shape_err!(
                "batch norm grad {} does not match cached input {}",
                grad_out.shape(),
                cache.xhat.shape()
            ));
        }
        let s = grad_out.shape();
        let count = T::of((s.n * s.plane()) as f64);
        let mut sum_g = vec![T::zero(); s.c];
        let mut sum_gx = vec![T::zero(); s.c];
        for i in 0..s.n {
            for j in 0..s.c {
                for (&g, &h) in grad_out.plane(i, j).iter().zip(cache.xhat.plane(i, j)) {
                    sum_g[j] += g;
                    sum_gx[j] += g * h;
                }
            }
        }
        let mut gx = grad_out.clone();
        for i in 0..s.n {
            for j in 0..s.c {
                let k = self.gamma[j] * cache.inv_std[j] / count;
                let (sg, sgx) = (sum_g[j], sum_gx[j]);
                for (o, &h) in gx.plane_mut(i, j).iter_mut().zip(cache.xhat.plane(i, j)) {
                    *o = k * (count * *o - sg - h * sgx);
                }
            }
        }
        Ok((gx, sum_gx, sum_g))
    }

    /// Backward that accumulates the affine gradients into the layer.
    pub fn backward_acc(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (gx, gg, gb) = self.backward(grad_out)?;
        for j in 0..self.channels() {
            self.grad_gamma[j] += gg[j];
            self.grad_beta[j] += gb[j];
        }
        Ok(gx)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}
