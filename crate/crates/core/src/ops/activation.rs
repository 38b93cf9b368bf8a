//! Element-wise activations and their backward passes.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{format_shape, Tensor};

pub fn relu_forward<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    input.map(|v| if v > S::zero() { v } else { S::zero() })
}

/// Passes gradient where the forward input was strictly positive; the
/// subgradient at exactly zero is zero.
pub fn relu_backward<S: Scalar>(input: &Tensor<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
    if input.shape() != grad_out.shape() {
        return Err(Error::ShapeMismatch {
            op: "relu_backward",
            left: format_shape(&input.shape()),
            right: format_shape(&grad_out.shape()),
        });
    }
    let data = input
        .as_slice()
        .iter()
        .zip(grad_out.as_slice())
        .map(|(&x, &g)| if x > S::zero() { g } else { S::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

/// Numerically stable logistic: never exponentiates a positive argument, so
/// large magnitudes saturate cleanly instead of overflowing.
#[inline]
fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_forward<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    input.map(|v| S::from_f64(sigmoid_scalar(v.as_f64())))
}

/// Backward in terms of the forward *output* y: grad_in = grad_out * y * (1 - y).
pub fn sigmoid_backward<S: Scalar>(output: &Tensor<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
    if output.shape() != grad_out.shape() {
        return Err(Error::ShapeMismatch {
            op: "sigmoid_backward",
            left: format_shape(&output.shape()),
            right: format_shape(&grad_out.shape()),
        });
    }
    let data = output
        .as_slice()
        .iter()
        .zip(grad_out.as_slice())
        .map(|(&y, &g)| {
            let yf = y.as_f64();
            S::from_f64(g.as_f64() * yf * (1.0 - yf))
        })
        .collect();
    Tensor::from_vec(output.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives_and_zero() {
        let x = Tensor::<f32>::from_vec([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = relu_forward(&x);
        assert_eq!(y.as_slice(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_all_negative_gives_zero_everything() {
        let x = Tensor::<f32>::filled([2, 2, 3, 3], -4.0);
        let y = relu_forward(&x);
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
        let g = Tensor::<f32>::filled([2, 2, 3, 3], 1.0);
        let gi = relu_backward(&x, &g).unwrap();
        assert!(gi.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let x = Tensor::<f32>::zeros([1, 1, 1, 1]);
        assert_eq!(sigmoid_forward(&x).as_slice()[0], 0.5);
    }

    #[test]
    fn sigmoid_saturates_without_nan() {
        let x = Tensor::<f32>::from_vec([1, 1, 1, 2], vec![50.0, -1000.0]).unwrap();
        let y = sigmoid_forward(&x);
        assert_eq!(y.as_slice()[0], 1.0);
        assert_eq!(y.as_slice()[1], 0.0);
        let g = Tensor::<f32>::filled([1, 1, 1, 2], 1.0);
        let gi = sigmoid_backward(&y, &g).unwrap();
        assert!(gi.all_finite());
        assert_eq!(gi.as_slice()[0], 0.0);
    }
}
