use crate::error::{config_err, shape_err, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Mean over each spatial map: `(n, c, h, w) -> (n, c, 1, 1)`.
pub fn global_avg_pool_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let inv = T::of(1.0 / s.plane() as f64);
    let mut out = Vec::with_capacity(s.n * s.c);
    for i in 0..s.n {
        for j in 0..s.c {
            out.push(x.plane(i, j).iter().fold(T::zero(), |a, &v| a + v) * inv);
        }
    }
    Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), out).expect("pooled shape is valid")
}

pub fn global_avg_pool_backward<T: Real>(input: Shape, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.shape() != Shape::new(input.n, input.c, 1, 1) {
        return Err(shape_err!("avg pool grad {} for input {input}", grad_out.shape()));
    }
    let inv = T::of(1.0 / input.plane() as f64);
    let mut gx = Tensor::zeros(input)?;
    for i in 0..input.n {
        for j in 0..input.c {
            let g = grad_out.data()[i * input.c + j] * inv;
            gx.plane_mut(i, j).fill(g);
        }
    }
    Ok(gx)
}

/// Square max pooling. Ties resolve to the first maximum in row-major scan order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaxPool {
    pub kernel: usize,
    pub stride: usize,
}

impl MaxPool {
    pub fn new(kernel: usize, stride: usize) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(config_err!("max pool kernel and stride must be positive"));
        }
        Ok(Self { kernel, stride })
    }

    pub fn output_shape(&self, s: Shape) -> Result<Shape> {
        if s.h < self.kernel || s.w < self.kernel {
            return Err(shape_err!("max pool window {} larger than {s}", self.kernel));
        }
        Ok(Shape::new(s.n, s.c, (s.h - self.kernel) / self.stride + 1, (s.w - self.kernel) / self.stride + 1))
    }

    /// Output plus the flat input index chosen for each output element.
    pub fn forward<T: Real>(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
        let s = x.shape();
        let o = self.output_shape(s)?;
        let mut out = Vec::with_capacity(o.numel());
        let mut arg = Vec::with_capacity(o.numel());
        for i in 0..s.n {
            for j in 0..s.c {
                for oy in 0..o.h {
                    for ox in 0..o.w {
                        let mut best = x.offset(i, j, oy * self.stride, ox * self.stride);
                        for ky in 0..self.kernel {
                            for kx in 0..self.kernel {
                                let idx = x.offset(i, j, oy * self.stride + ky, ox * self.stride + kx);
                                if x.data()[idx] > x.data()[best] {
                                    best = idx;
                                }
                            }
                        }
                        out.push(x.data()[best]);
                        arg.push(best);
                    }
                }
            }
        }
        Ok((Tensor::from_vec(o, out)?, arg))
    }

    pub fn backward<T: Real>(&self, input: Shape, argmax: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        if grad_out.len() != argmax.len() || grad_out.shape() != self.output_shape(input)? {
            return Err(shape_err!("max pool grad {} for input {input}", grad_out.shape()));
        }
        let mut gx = Tensor::zeros(input)?;
        for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
            gx.data_mut()[idx] += g;
        }
        Ok(gx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn avg_pool_constant() {
        let x = Tensor::<f64>::full((2, 3, 8, 8), 5.0).unwrap();
        let y = global_avg_pool_forward(&x);
        assert_eq!(y.shape(), Shape::new(2, 3, 1, 1));
        assert!(y.data().iter().all(|&v| v == 5.0));
        let g = global_avg_pool_backward(x.shape(), &Tensor::full((2, 3, 1, 1), 64.0).unwrap()).unwrap();
        assert!(g.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn max_pool_ties_pick_first() {
        let x = Tensor::<f64>::from_f64((1, 1, 2, 2), &[3.0, 3.0, 1.0, 3.0]).unwrap();
        let p = MaxPool::new(2, 2).unwrap();
        let (y, arg) = p.forward(&x).unwrap();
        assert_eq!(y.data(), &[3.0]);
        assert_eq!(arg, vec![0]);
        let gx = p.backward(x.shape(), &arg, &Tensor::full((1, 1, 1, 1), 2.0).unwrap()).unwrap();
        assert_eq!(gx.data(), &[2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_values() {
        let x = Tensor::<f64>::from_vec((1, 1, 4, 4), (0..16).map(f64::from).collect()).unwrap();
        let (y, _) = MaxPool::new(2, 2).unwrap().forward(&x).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
        assert!(MaxPool::new(5, 1).unwrap().forward(&x).is_err());
    }
}
