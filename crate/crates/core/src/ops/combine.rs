//! Channel concatenation and element-wise addition.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{format_shape, Tensor};

/// Concatenates along the channel axis, `a`'s channels first. Batch and
/// spatial dims must agree.
pub fn concat_channels<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let [n, ca, h, w] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    if n != nb || h != hb || w != wb {
        return Err(Error::ShapeMismatch {
            op: "concat_channels",
            left: format_shape(&a.shape()),
            right: format_shape(&b.shape()),
        });
    }
    let plane = h * w;
    let mut out = Tensor::zeros([n, ca + cb, h, w]);
    for ni in 0..n {
        let dst_a = out.index_of(ni, 0, 0, 0);
        let src_a = ni * ca * plane;
        out.as_mut_slice()[dst_a..dst_a + ca * plane]
            .copy_from_slice(&a.as_slice()[src_a..src_a + ca * plane]);
        let dst_b = out.index_of(ni, ca, 0, 0);
        let src_b = ni * cb * plane;
        out.as_mut_slice()[dst_b..dst_b + cb * plane]
            .copy_from_slice(&b.as_slice()[src_b..src_b + cb * plane]);
    }
    Ok(out)
}

/// Splits a gradient back into the two concatenated operands' shapes;
/// `channels_a` is the channel count of the first operand.
pub fn concat_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    channels_a: usize,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let [n, c, h, w] = grad_out.shape();
    if channels_a > c {
        return Err(Error::InvalidArgument {
            op: "concat_backward",
            what: format!("split at channel {channels_a} exceeds {c} channels"),
        });
    }
    let (ca, cb) = (channels_a, c - channels_a);
    let plane = h * w;
    let mut ga = Tensor::zeros([n, ca, h, w]);
    let mut gb = Tensor::zeros([n, cb, h, w]);
    for ni in 0..n {
        let src_a = grad_out.index_of(ni, 0, 0, 0);
        ga.as_mut_slice()[ni * ca * plane..(ni + 1) * ca * plane]
            .copy_from_slice(&grad_out.as_slice()[src_a..src_a + ca * plane]);
        let src_b = grad_out.index_of(ni, ca, 0, 0);
        gb.as_mut_slice()[ni * cb * plane..(ni + 1) * cb * plane]
            .copy_from_slice(&grad_out.as_slice()[src_b..src_b + cb * plane]);
    }
    Ok((ga, gb))
}

/// Element-wise sum of two same-shape tensors. The backward pass is the
/// identity onto both operands, so no separate function exists for it.
pub fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "add",
            left: format_shape(&a.shape()),
            right: format_shape(&b.shape()),
        });
    }
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor::from_vec(a.shape(), data)
}
