//! Batch normalization over the (N, H, W) axes of a rank-4 tensor.
//!
//! Training mode normalizes by batch statistics and folds them into the
//! running estimates; inference mode is a pure per-element affine map built
//! from the running estimates, so it is independent of batch composition.
//! Statistics are accumulated in f64.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{format_shape, Tensor};

/// Per-channel batch statistics captured by a training-mode forward; the
/// backward pass needs exactly these (plus the epsilon the forward used) to
/// differentiate through the normalization.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub epsilon: f64,
}

fn check_channels<S: Scalar>(input: &Tensor<S>, vecs: &[&[S]]) -> Result<()> {
    let c = input.channels();
    for v in vecs {
        if v.len() != c {
            return Err(Error::BatchNormChannels {
                channels: c,
                got: v.len(),
            });
        }
    }
    Ok(())
}

/// Training-mode forward. Normalizes by this batch's per-channel mean and
/// (biased) variance, applies scale/shift, and updates the running
/// statistics in place: `running = momentum * running + (1 - momentum) * batch`.
pub fn batchnorm_train<S: Scalar>(
    input: &Tensor<S>,
    gamma: &[S],
    beta: &[S],
    momentum: f64,
    epsilon: f64,
    running_mean: &mut [S],
    running_var: &mut [S],
) -> Result<(Tensor<S>, BnStats)> {
    check_channels(input, &[gamma, beta, running_mean, running_var])?;
    let c = input.channels();
    let m = input.batch() * input.height() * input.width();
    if m <= 1 {
        return Err(Error::BatchNormDegenerate);
    }

    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    let mut out = Tensor::zeros(input.shape());
    let plane = input.height() * input.width();

    for ci in 0..c {
        let mut sum = 0.0f64;
        for n in 0..input.batch() {
            let base = input.index_of(n, ci, 0, 0);
            sum += input.as_slice()[base..base + plane]
                .iter()
                .map(|v| v.as_f64())
                .sum::<f64>();
        }
        let mu = sum / m as f64;

        let mut sq = 0.0f64;
        for n in 0..input.batch() {
            let base = input.index_of(n, ci, 0, 0);
            sq += input.as_slice()[base..base + plane]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mu;
                    d * d
                })
                .sum::<f64>();
        }
        let v = sq / m as f64;
        mean[ci] = mu;
        var[ci] = v;

        let inv = 1.0 / (v + epsilon).sqrt();
        let g = gamma[ci].as_f64();
        let b = beta[ci].as_f64();
        for n in 0..input.batch() {
            let base = input.index_of(n, ci, 0, 0);
            let src = &input.as_slice()[base..base + plane];
            let dst = &mut out.as_mut_slice()[base..base + plane];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = S::from_f64(g * (s.as_f64() - mu) * inv + b);
            }
        }

        running_mean[ci] =
            S::from_f64(momentum * running_mean[ci].as_f64() + (1.0 - momentum) * mu);
        running_var[ci] = S::from_f64(momentum * running_var[ci].as_f64() + (1.0 - momentum) * v);
    }

    Ok((out, BnStats { mean, var, epsilon }))
}

/// Inference-mode forward: per-element affine map from the running statistics.
pub fn batchnorm_infer<S: Scalar>(
    input: &Tensor<S>,
    gamma: &[S],
    beta: &[S],
    running_mean: &[S],
    running_var: &[S],
    epsilon: f64,
) -> Result<Tensor<S>> {
    check_channels(input, &[gamma, beta, running_mean, running_var])?;
    let c = input.channels();
    let plane = input.height() * input.width();
    let mut out = Tensor::zeros(input.shape());

    // Fold everything into one scale and shift per channel.
    let coeffs: Vec<(f64, f64)> = (0..c)
        .map(|ci| {
            let inv = 1.0 / (running_var[ci].as_f64() + epsilon).sqrt();
            let scale = gamma[ci].as_f64() * inv;
            let shift = beta[ci].as_f64() - scale * running_mean[ci].as_f64();
            (scale, shift)
        })
        .collect();

    for n in 0..input.batch() {
        for (ci, &(scale, shift)) in coeffs.iter().enumerate() {
            let base = input.index_of(n, ci, 0, 0);
            let src = &input.as_slice()[base..base + plane];
            let dst = &mut out.as_mut_slice()[base..base + plane];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = S::from_f64(scale * s.as_f64() + shift);
            }
        }
    }
    Ok(out)
}

/// Backward through a training-mode forward, differentiating the full batch
/// normalization including the dependence of the batch mean and variance on
/// the input. Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm_backward<S: Scalar>(
    input: &Tensor<S>,
    gamma: &[S],
    stats: &BnStats,
    grad_out: &Tensor<S>,
) -> Result<(Tensor<S>, Vec<S>, Vec<S>)> {
    check_channels(input, &[gamma])?;
    if input.shape() != grad_out.shape() {
        return Err(Error::ShapeMismatch {
            op: "batchnorm_backward",
            left: format_shape(&input.shape()),
            right: format_shape(&grad_out.shape()),
        });
    }
    let c = input.channels();
    let m = (input.batch() * input.height() * input.width()) as f64;
    let plane = input.height() * input.width();

    let mut grad_input = Tensor::zeros(input.shape());
    let mut grad_gamma = vec![S::zero(); c];
    let mut grad_beta = vec![S::zero(); c];

    for ci in 0..c {
        let mu = stats.mean[ci];
        let inv = 1.0 / (stats.var[ci] + stats.epsilon).sqrt();

        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for n in 0..input.batch() {
            let base = input.index_of(n, ci, 0, 0);
            let x = &input.as_slice()[base..base + plane];
            let g = &grad_out.as_slice()[base..base + plane];
            for (xv, gv) in x.iter().zip(g) {
                let xh = (xv.as_f64() - mu) * inv;
                let gf = gv.as_f64();
                sum_g += gf;
                sum_gx += gf * xh;
            }
        }
        grad_beta[ci] = S::from_f64(sum_g);
        grad_gamma[ci] = S::from_f64(sum_gx);

        let gscale = gamma[ci].as_f64() * inv;
        for n in 0..input.batch() {
            let base = input.index_of(n, ci, 0, 0);
            let x = &input.as_slice()[base..base + plane];
            let g = &grad_out.as_slice()[base..base + plane];
            let dst = &mut grad_input.as_mut_slice()[base..base + plane];
            for ((xv, gv), d) in x.iter().zip(g).zip(dst.iter_mut()) {
                let xh = (xv.as_f64() - mu) * inv;
                let gf = gv.as_f64();
                *d = S::from_f64(gscale * (gf - sum_g / m - xh * sum_gx / m));
            }
        }
    }
    Ok((grad_input, grad_gamma, grad_beta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: [usize; 4], seed: u64) -> Tensor<f32> {
        // Small deterministic LCG; good enough for shaping test data.
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        Tensor::from_fn(shape, |_, _, _, _| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64 - 1.0) as f32
        })
    }

    #[test]
    fn train_mode_normalizes_to_unit_stats() {
        // Input variance well above epsilon so the normalizer's +eps term
        // stays below the asserted tolerance.
        let x = rand_tensor([2, 3, 4, 4], 7).map(|v| v * 5.0);
        let gamma = vec![1.0f32; 3];
        let beta = vec![0.0f32; 3];
        let mut rm = vec![0.0f32; 3];
        let mut rv = vec![1.0f32; 3];
        let (y, _) = batchnorm_train(&x, &gamma, &beta, 0.9, 1e-5, &mut rm, &mut rv).unwrap();
        let m = (2 * 4 * 4) as f64;
        for c in 0..3 {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for n in 0..2 {
                for h in 0..4 {
                    for w in 0..4 {
                        let v = y.at(n, c, h, w) as f64;
                        sum += v;
                        sq += v * v;
                    }
                }
            }
            let mean = sum / m;
            let var = sq / m - mean * mean;
            assert!(mean.abs() < 1e-5, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-5, "channel {c} var {var}");
        }
    }

    #[test]
    fn inference_constant_input_matches_hand_value() {
        let x = Tensor::<f32>::filled([2, 1, 3, 3], 5.0);
        let y = batchnorm_infer(&x, &[2.0], &[3.0], &[5.0], &[1.0], 1e-5).unwrap();
        for &v in y.as_slice() {
            assert!((v - 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_element_training_batch_rejected() {
        let x = Tensor::<f32>::filled([1, 2, 1, 1], 1.0);
        let mut rm = vec![0.0f32; 2];
        let mut rv = vec![1.0f32; 2];
        let err = batchnorm_train(&x, &[1.0, 1.0], &[0.0, 0.0], 0.9, 1e-5, &mut rm, &mut rv);
        assert!(matches!(err, Err(Error::BatchNormDegenerate)));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let x = Tensor::<f32>::zeros([1, 3, 2, 2]);
        let mut rm = vec![0.0f32; 3];
        let mut rv = vec![1.0f32; 3];
        let err = batchnorm_train(&x, &[1.0; 2], &[0.0; 3], 0.9, 1e-5, &mut rm, &mut rv);
        assert!(matches!(err, Err(Error::BatchNormChannels { .. })));
    }

    #[test]
    fn constant_grad_out_beta_gradient_is_count() {
        let x = rand_tensor([2, 3, 4, 4], 11);
        let gamma = vec![1.0f32; 3];
        let beta = vec![0.0f32; 3];
        let mut rm = vec![0.0f32; 3];
        let mut rv = vec![1.0f32; 3];
        let (_, stats) = batchnorm_train(&x, &gamma, &beta, 0.9, 1e-5, &mut rm, &mut rv).unwrap();
        let g = Tensor::<f32>::filled([2, 3, 4, 4], 1.0);
        let (_, _, gb) = batchnorm_backward(&x, &gamma, &stats, &g).unwrap();
        for &v in &gb {
            assert_eq!(v, 32.0); // N*H*W = 2*4*4
        }
    }

    #[test]
    fn zero_grad_out_gives_zero_gradients() {
        let x = rand_tensor([2, 2, 3, 3], 3);
        let gamma = vec![1.5f32; 2];
        let mut rm = vec![0.0f32; 2];
        let mut rv = vec![1.0f32; 2];
        let (_, stats) =
            batchnorm_train(&x, &gamma, &[0.0; 2], 0.9, 1e-5, &mut rm, &mut rv).unwrap();
        let g = Tensor::<f32>::zeros([2, 2, 3, 3]);
        let (gi, gg, gb) = batchnorm_backward(&x, &gamma, &stats, &g).unwrap();
        assert!(gi.as_slice().iter().all(|&v| v == 0.0));
        assert!(gg.iter().chain(gb.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn inference_is_independent_of_batch_composition() {
        let x = rand_tensor([4, 3, 5, 5], 21);
        let gamma = vec![0.7f32, 1.3, -0.4];
        let beta = vec![0.1f32, -0.2, 0.3];
        let rm = vec![0.05f32, -0.1, 0.2];
        let rv = vec![0.9f32, 1.4, 0.3];
        let joint = batchnorm_infer(&x, &gamma, &beta, &rm, &rv, 1e-5).unwrap();

        // Split the batch in two, process separately, and re-concatenate.
        let half = |lo: usize, hi: usize| {
            Tensor::<f32>::from_fn([hi - lo, 3, 5, 5], |n, c, h, w| x.at(lo + n, c, h, w))
        };
        let a = batchnorm_infer(&half(0, 2), &gamma, &beta, &rm, &rv, 1e-5).unwrap();
        let b = batchnorm_infer(&half(2, 4), &gamma, &beta, &rm, &rv, 1e-5).unwrap();
        let merged = Tensor::<f32>::from_fn([4, 3, 5, 5], |n, c, h, w| {
            if n < 2 {
                a.at(n, c, h, w)
            } else {
                b.at(n - 2, c, h, w)
            }
        });
        assert!(joint.bit_eq(&merged));
    }

    #[test]
    fn train_mode_matches_scalar_double_precision_reference() {
        let x = rand_tensor([2, 3, 4, 4], 31).map(|v| v * 2.0);
        let gamma = vec![0.8f32, 1.2, -0.5];
        let beta = vec![0.1f32, 0.0, -0.3];
        let mut rm = vec![0.0f32; 3];
        let mut rv = vec![1.0f32; 3];
        let eps = 1e-5;
        let (y, _) = batchnorm_train(&x, &gamma, &beta, 0.9, eps, &mut rm, &mut rv).unwrap();

        // Plain scalar re-derivation, all in f64.
        let m = (2 * 4 * 4) as f64;
        for c in 0..3 {
            let mut sum = 0.0f64;
            for n in 0..2 {
                for h in 0..4 {
                    for w in 0..4 {
                        sum += x.at(n, c, h, w) as f64;
                    }
                }
            }
            let mu = sum / m;
            let mut sq = 0.0f64;
            for n in 0..2 {
                for h in 0..4 {
                    for w in 0..4 {
                        sq += (x.at(n, c, h, w) as f64 - mu).powi(2);
                    }
                }
            }
            let var = sq / m;
            for n in 0..2 {
                for h in 0..4 {
                    for w in 0..4 {
                        let expected = gamma[c] as f64 * (x.at(n, c, h, w) as f64 - mu)
                            / (var + eps).sqrt()
                            + beta[c] as f64;
                        let got = y.at(n, c, h, w) as f64;
                        assert!(
                            (got - expected).abs() < 1e-5,
                            "({n},{c},{h},{w}): {got} vs {expected}"
                        );
                    }
                }
            }
        }
    }
}
