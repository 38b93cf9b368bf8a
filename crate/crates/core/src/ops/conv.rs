//! 2-D convolution (cross-correlation convention, zero padding).
//!
//! The forward and backward passes lower each batch sample to an im2col
//! matrix and run the contraction as a GEMM. Column buffers and all
//! accumulation are 64-bit; results are cast back to storage precision once.
//! Output chunks are processed in a fixed row order, so results are
//! bit-stable regardless of call context.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{format_shape, Tensor};

/// Spatial output size for one axis: `(dim + 2*padding - k) / stride + 1`.
#[inline]
pub fn conv_out_dim(dim: usize, k: usize, stride: usize, padding: usize) -> usize {
    (dim + 2 * padding - k) / stride + 1
}

fn validate<S: Scalar>(
    op: &'static str,
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, usize)> {
    let [c_out, c_in, kh, kw] = kernel.shape();
    if kh != kw || !(kh == 1 || kh == 3) {
        return Err(Error::InvalidArgument {
            op,
            what: format!("kernel must be square 1x1 or 3x3, got {}x{}", kh, kw),
        });
    }
    if !(stride == 1 || stride == 2) {
        return Err(Error::InvalidArgument {
            op,
            what: format!("stride must be 1 or 2, got {stride}"),
        });
    }
    if input.channels() != c_in {
        return Err(Error::ChannelMismatch {
            op,
            input_channels: input.channels(),
            kernel_channels: c_in,
            kernel_shape: format_shape(&kernel.shape()),
        });
    }
    if input.height() + 2 * padding < kh || input.width() + 2 * padding < kh {
        return Err(Error::InvalidArgument {
            op,
            what: format!(
                "padded input {}x{} is smaller than the {kh}x{kh} kernel",
                input.height() + 2 * padding,
                input.width() + 2 * padding
            ),
        });
    }
    Ok((c_out, c_in, kh))
}

/// Picks how many output rows to lower per GEMM call. Small enough to keep
/// the f64 column buffer in cache-friendly territory, large enough that the
/// GEMM is not starved.
fn rows_per_chunk(k_dim: usize, out_w: usize, out_h: usize) -> usize {
    let n_target = (3_000_000 / k_dim.max(1)).clamp(512, 4096);
    (n_target / out_w.max(1)).clamp(1, out_h.max(1))
}

/// Fills `col` (k_dim x n_cols, row-major) with the im2col lowering of one
/// input sample restricted to output rows `[row0, row0 + rows)`.
#[allow(clippy::too_many_arguments)]
fn im2col_chunk<S: Scalar>(
    input: &Tensor<S>,
    n: usize,
    k: usize,
    stride: usize,
    padding: usize,
    out_w: usize,
    row0: usize,
    rows: usize,
    col: &mut [f64],
) {
    let (c_in, in_h, in_w) = (input.channels(), input.height(), input.width());
    let n_cols = rows * out_w;
    let data = input.as_slice();
    let mut row_idx = 0;
    for ci in 0..c_in {
        let plane = &data[input.index_of(n, ci, 0, 0)..input.index_of(n, ci, 0, 0) + in_h * in_w];
        for dy in 0..k {
            for dx in 0..k {
                let dst = &mut col[row_idx * n_cols..(row_idx + 1) * n_cols];
                row_idx += 1;
                for (r, oh) in (row0..row0 + rows).enumerate() {
                    let ih = (oh * stride + dy) as isize - padding as isize;
                    let dst_row = &mut dst[r * out_w..(r + 1) * out_w];
                    if ih < 0 || ih >= in_h as isize {
                        dst_row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src_row = &plane[ih as usize * in_w..(ih as usize + 1) * in_w];
                    for (ow, v) in dst_row.iter_mut().enumerate() {
                        let iw = (ow * stride + dx) as isize - padding as isize;
                        *v = if iw < 0 || iw >= in_w as isize {
                            0.0
                        } else {
                            src_row[iw as usize].as_f64()
                        };
                    }
                }
            }
        }
    }
}

/// C(m x n) = alpha * A(m x k) * B(k x n) + beta * C, all row-major.
#[allow(clippy::too_many_arguments)]
fn dgemm_rowmajor(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|v| *v = 0.0);
        } else if beta != 1.0 {
            c.iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Direct convolution of `input` with `kernel` (shape `C_out x C_in x k x k`).
///
/// Output shape is `(N, C_out, conv_out_dim(H), conv_out_dim(W))`.
pub fn conv2d_forward<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<S>> {
    let (c_out, c_in, k) = validate("conv2d_forward", input, kernel, stride, padding)?;
    let out_h = conv_out_dim(input.height(), k, stride, padding);
    let out_w = conv_out_dim(input.width(), k, stride, padding);
    let k_dim = c_in * k * k;
    let mut out = Tensor::zeros([input.batch(), c_out, out_h, out_w]);

    let kernel_f64: Vec<f64> = kernel.as_slice().iter().map(|v| v.as_f64()).collect();
    let chunk_rows = rows_per_chunk(k_dim, out_w, out_h);
    let mut col = vec![0.0f64; k_dim * chunk_rows * out_w];
    let mut out_chunk = vec![0.0f64; c_out * chunk_rows * out_w];

    for n in 0..input.batch() {
        let mut row0 = 0;
        while row0 < out_h {
            let rows = chunk_rows.min(out_h - row0);
            let n_cols = rows * out_w;
            im2col_chunk(
                input,
                n,
                k,
                stride,
                padding,
                out_w,
                row0,
                rows,
                &mut col[..k_dim * n_cols],
            );
            dgemm_rowmajor(
                c_out,
                k_dim,
                n_cols,
                1.0,
                &kernel_f64,
                k_dim as isize,
                1,
                &col[..k_dim * n_cols],
                n_cols as isize,
                1,
                0.0,
                &mut out_chunk[..c_out * n_cols],
            );
            let out_data = out.as_mut_slice();
            for co in 0..c_out {
                let base = ((n * c_out + co) * out_h + row0) * out_w;
                for (dst, src) in out_data[base..base + n_cols]
                    .iter_mut()
                    .zip(&out_chunk[co * n_cols..(co + 1) * n_cols])
                {
                    *dst = S::from_f64(*src);
                }
            }
            row0 += rows;
        }
    }
    Ok(out)
}

/// Gradients of `sum(grad_out * conv2d_forward(input, kernel))` with respect
/// to the input and the kernel.
pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (c_out, c_in, k) = validate("conv2d_backward", input, kernel, stride, padding)?;
    let out_h = conv_out_dim(input.height(), k, stride, padding);
    let out_w = conv_out_dim(input.width(), k, stride, padding);
    let expected = [input.batch(), c_out, out_h, out_w];
    if grad_out.shape() != expected {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            left: format_shape(&expected),
            right: format_shape(&grad_out.shape()),
        });
    }

    let (in_h, in_w) = (input.height(), input.width());
    let k_dim = c_in * k * k;
    let kernel_f64: Vec<f64> = kernel.as_slice().iter().map(|v| v.as_f64()).collect();
    let mut grad_kernel_f64 = vec![0.0f64; kernel.len()];
    let mut grad_input = Tensor::zeros(input.shape());

    let chunk_rows = rows_per_chunk(k_dim, out_w, out_h);
    let mut col = vec![0.0f64; k_dim * chunk_rows * out_w];
    let mut dcol = vec![0.0f64; k_dim * chunk_rows * out_w];
    let mut g_chunk = vec![0.0f64; c_out * chunk_rows * out_w];
    let mut dx_sample = vec![0.0f64; c_in * in_h * in_w];

    for n in 0..input.batch() {
        dx_sample.iter_mut().for_each(|v| *v = 0.0);
        let mut row0 = 0;
        while row0 < out_h {
            let rows = chunk_rows.min(out_h - row0);
            let n_cols = rows * out_w;
            im2col_chunk(
                input,
                n,
                k,
                stride,
                padding,
                out_w,
                row0,
                rows,
                &mut col[..k_dim * n_cols],
            );
            for co in 0..c_out {
                let base = ((n * c_out + co) * out_h + row0) * out_w;
                for (dst, src) in g_chunk[co * n_cols..(co + 1) * n_cols]
                    .iter_mut()
                    .zip(&grad_out.as_slice()[base..base + n_cols])
                {
                    *dst = src.as_f64();
                }
            }
            // dW += G * col^T
            dgemm_rowmajor(
                c_out,
                n_cols,
                k_dim,
                1.0,
                &g_chunk[..c_out * n_cols],
                n_cols as isize,
                1,
                &col[..k_dim * n_cols],
                1,
                n_cols as isize,
                1.0,
                &mut grad_kernel_f64,
            );
            // dcol = W^T * G
            dgemm_rowmajor(
                k_dim,
                c_out,
                n_cols,
                1.0,
                &kernel_f64,
                1,
                k_dim as isize,
                &g_chunk[..c_out * n_cols],
                n_cols as isize,
                1,
                0.0,
                &mut dcol[..k_dim * n_cols],
            );
            // col2im: scatter-add dcol back onto the input sample.
            let mut row_idx = 0;
            for ci in 0..c_in {
                let plane = &mut dx_sample[ci * in_h * in_w..(ci + 1) * in_h * in_w];
                for dy in 0..k {
                    for dx in 0..k {
                        let src = &dcol[row_idx * n_cols..(row_idx + 1) * n_cols];
                        row_idx += 1;
                        for (r, oh) in (row0..row0 + rows).enumerate() {
                            let ih = (oh * stride + dy) as isize - padding as isize;
                            if ih < 0 || ih >= in_h as isize {
                                continue;
                            }
                            let dst_row = &mut plane[ih as usize * in_w..(ih as usize + 1) * in_w];
                            for (ow, v) in src[r * out_w..(r + 1) * out_w].iter().enumerate() {
                                let iw = (ow * stride + dx) as isize - padding as isize;
                                if iw >= 0 && iw < in_w as isize {
                                    dst_row[iw as usize] += *v;
                                }
                            }
                        }
                    }
                }
            }
            row0 += rows;
        }
        let base = grad_input.index_of(n, 0, 0, 0);
        let gi = grad_input.as_mut_slice();
        for (dst, src) in gi[base..base + dx_sample.len()].iter_mut().zip(&dx_sample) {
            *dst = S::from_f64(*src);
        }
    }

    let grad_kernel = Tensor::from_vec(
        kernel.shape(),
        grad_kernel_f64.iter().map(|&v| S::from_f64(v)).collect(),
    )?;
    Ok((grad_input, grad_kernel))
}
