use super::Tensor;
use crate::error::{Error, Result};

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Passes the gradient where `input > 0`; the subgradient at zero is zero.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if input.shape() != grad_out.shape() {
        return Err(Error::shape(format!("relu grad {} vs input {}", grad_out.shape(), input.shape())));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

#[inline]
pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    input.map(logistic)
}

/// Takes the forward *output* `o` and applies `o(1-o)`.
pub fn sigmoid_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if output.shape() != grad_out.shape() {
        return Err(Error::shape(format!("sigmoid grad {} vs output {}", grad_out.shape(), output.shape())));
    }
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&o, &g)| g * o * (1.0 - o))
        .collect();
    Tensor::from_vec(output.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_values() {
        let x = Tensor::from_vec(Shape::new(1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &Tensor::filled(x.shape(), 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sigmoid_midpoint_and_symmetry() {
        let x = Tensor::zeros(Shape::new(1, 1, 1));
        assert_eq!(sigmoid(&x).data(), &[0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let v: f64 = rng.gen_range(-30.0..30.0);
            assert!((logistic(v) - (1.0 - logistic(-v))).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_saturates_without_nan() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2), vec![-800.0, 800.0]).unwrap();
        let y = sigmoid(&x);
        assert!(y.is_finite());
        assert_eq!(y.data(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_shape_mismatch() {
        let a = Tensor::zeros(Shape::new(1, 2, 2));
        let b = Tensor::zeros(Shape::new(1, 2, 3));
        assert!(relu_backward(&a, &b).is_err());
        assert!(sigmoid_backward(&a, &b).is_err());
    }
}
