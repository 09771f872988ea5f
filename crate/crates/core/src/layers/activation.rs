use crate::error::Result;
use crate::tensor::{Real, Tensor};

pub fn relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient passes where the forward input was strictly positive.
pub fn relu_backward<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(grad_out, |v, g| if v > T::zero() { g } else { T::zero() })
}

/// In-place ReLU.
pub fn relu_inplace<T: Real>(x: &mut Tensor<T>) {
    for v in x.data_mut() {
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_example() {
        let x = Tensor::<f64>::from_f64((1, 1, 1, 3), &[-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
        let g = Tensor::full((1, 1, 1, 3), 5.0).unwrap();
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0, 0.0, 5.0]);
        let mut y = x.clone();
        relu_inplace(&mut y);
        assert_eq!(y, relu_forward(&x));
    }
}
