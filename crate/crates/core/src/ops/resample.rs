//! Nearest-neighbor 2x upsampling and its adjoint.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{format_shape, Tensor};

/// Replicates every pixel into a 2x2 block: `(N, C, H, W) -> (N, C, 2H, 2W)`.
pub fn upsample2x_forward<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    let [n, c, h, w] = input.shape();
    let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
    for ni in 0..n {
        for ci in 0..c {
            for hi in 0..h {
                let src = input.index_of(ni, ci, hi, 0);
                let row = &input.as_slice()[src..src + w];
                for sub in 0..2 {
                    let dst = out.index_of(ni, ci, 2 * hi + sub, 0);
                    let dst_row = &mut out.as_mut_slice()[dst..dst + 2 * w];
                    for (wi, &v) in row.iter().enumerate() {
                        dst_row[2 * wi] = v;
                        dst_row[2 * wi + 1] = v;
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of the replication: sums each 2x2 block of `grad_out` into one
/// cell. Requires even spatial dims.
pub fn upsample2x_backward<S: Scalar>(grad_out: &Tensor<S>) -> Result<Tensor<S>> {
    let [n, c, h2, w2] = grad_out.shape();
    if h2 % 2 != 0 || w2 % 2 != 0 {
        return Err(Error::ShapeMismatch {
            op: "upsample2x_backward",
            left: "even spatial dims".to_string(),
            right: format_shape(&grad_out.shape()),
        });
    }
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor::zeros([n, c, h, w]);
    for ni in 0..n {
        for ci in 0..c {
            for hi in 0..h {
                let top = grad_out.index_of(ni, ci, 2 * hi, 0);
                let bot = grad_out.index_of(ni, ci, 2 * hi + 1, 0);
                let dst = out.index_of(ni, ci, hi, 0);
                for wi in 0..w {
                    let g = grad_out.as_slice()[top + 2 * wi].as_f64()
                        + grad_out.as_slice()[top + 2 * wi + 1].as_f64()
                        + grad_out.as_slice()[bot + 2 * wi].as_f64()
                        + grad_out.as_slice()[bot + 2 * wi + 1].as_f64();
                    out.as_mut_slice()[dst + wi] = S::from_f64(g);
                }
            }
        }
    }
    Ok(out)
}
