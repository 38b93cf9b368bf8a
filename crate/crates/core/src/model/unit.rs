//! Full pre-activation residual unit: y = h(x) + F(x).
//!
//! F is [BN -> ReLU -> conv (first_stride)] -> [BN -> ReLU -> conv (stride 1)],
//! with the leading BN+ReLU omitted when the unit is not preactivated.
//! h is the identity when the unit preserves shape, otherwise a 1x1
//! projection with the same stride as the first conv.

use crate::error::{Error, Result};
use crate::model::graph::UnitWiring;
use crate::model::params::ParamStore;
use crate::ops::{
    add, batchnorm_backward, batchnorm_infer, batchnorm_train, conv2d_backward, conv2d_forward,
    relu_backward, relu_forward, BnStats,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Activations a training-mode forward keeps for the backward pass.
///
/// ReLU inputs are not stored: for gradient purposes the mask
/// `relu(x) > 0` equals `x > 0`, so the kept ReLU *outputs* serve both as
/// conv inputs and as the backward masks.
#[derive(Debug)]
pub struct UnitTape<S: Scalar> {
    pub x_in: Tensor<S>,
    bn_a: Option<BnStats>,
    /// ReLU output feeding conv_a; `None` when not preactivated (conv_a
    /// then reads `x_in` directly).
    r_a: Option<Tensor<S>>,
    /// conv_a output (input of the second BN).
    c1: Tensor<S>,
    bn_b: BnStats,
    /// ReLU output feeding conv_b.
    r_b: Tensor<S>,
}

fn check_in_channels<S: Scalar>(x: &Tensor<S>, wiring: &UnitWiring) -> Result<()> {
    if x.channels() != wiring.spec.in_channels {
        return Err(Error::InvalidArgument {
            op: "residual_unit",
            what: format!(
                "input has {} channels, unit expects {}",
                x.channels(),
                wiring.spec.in_channels
            ),
        });
    }
    Ok(())
}

fn bn_infer_layer<S: Scalar>(
    store: &ParamStore<S>,
    prefix: &str,
    x: &Tensor<S>,
) -> Result<Tensor<S>> {
    batchnorm_infer(
        x,
        store.get(&format!("{prefix}.gamma"))?.as_slice(),
        store.get(&format!("{prefix}.beta"))?.as_slice(),
        store.get(&format!("{prefix}.running_mean"))?.as_slice(),
        store.get(&format!("{prefix}.running_var"))?.as_slice(),
        store.meta.bn_epsilon,
    )
}

/// Training-mode BN through the store: normalizes by batch statistics and
/// writes the updated running estimates back.
fn bn_train_layer<S: Scalar>(
    store: &mut ParamStore<S>,
    prefix: &str,
    x: &Tensor<S>,
) -> Result<(Tensor<S>, BnStats)> {
    let gamma = store.get(&format!("{prefix}.gamma"))?.as_slice().to_vec();
    let beta = store.get(&format!("{prefix}.beta"))?.as_slice().to_vec();
    let rm_name = format!("{prefix}.running_mean");
    let rv_name = format!("{prefix}.running_var");
    let mut rm = store.get(&rm_name)?.as_slice().to_vec();
    let mut rv = store.get(&rv_name)?.as_slice().to_vec();
    let (out, stats) = batchnorm_train(
        x,
        &gamma,
        &beta,
        store.meta.bn_momentum,
        store.meta.bn_epsilon,
        &mut rm,
        &mut rv,
    )?;
    store.get_mut(&rm_name)?.as_mut_slice().copy_from_slice(&rm);
    store.get_mut(&rv_name)?.as_mut_slice().copy_from_slice(&rv);
    Ok((out, stats))
}

fn kernel_name(conv: &str) -> String {
    format!("{conv}.kernel")
}

/// Shortcut h(x): identity or strided 1x1 projection.
fn shortcut_forward<S: Scalar>(
    x: &Tensor<S>,
    wiring: &UnitWiring,
    store: &ParamStore<S>,
) -> Result<Tensor<S>> {
    match &wiring.proj {
        Some(proj) => conv2d_forward(
            x,
            store.get(&kernel_name(proj))?,
            wiring.spec.first_stride,
            0,
        ),
        None => Ok(x.clone()),
    }
}

pub fn unit_forward_infer<S: Scalar>(
    x: &Tensor<S>,
    wiring: &UnitWiring,
    store: &ParamStore<S>,
    mut trace: Option<&mut crate::model::net::ShapeTrace>,
) -> Result<Tensor<S>> {
    check_in_channels(x, wiring)?;
    let r_a = match &wiring.bn_a {
        Some(bn) => relu_forward(&bn_infer_layer(store, bn, x)?),
        None => x.clone(),
    };
    let c1 = conv2d_forward(
        &r_a,
        store.get(&kernel_name(&wiring.conv_a))?,
        wiring.spec.first_stride,
        1,
    )?;
    if let Some(trace) = trace.as_mut() {
        trace.push((wiring.conv_a.clone(), c1.shape()));
    }
    let r_b = relu_forward(&bn_infer_layer(store, &wiring.bn_b, &c1)?);
    let f = conv2d_forward(&r_b, store.get(&kernel_name(&wiring.conv_b))?, 1, 1)?;
    if let Some(trace) = trace.as_mut() {
        trace.push((wiring.conv_b.clone(), f.shape()));
    }
    add(&shortcut_forward(x, wiring, store)?, &f)
}

pub fn unit_forward_train<S: Scalar>(
    x: &Tensor<S>,
    wiring: &UnitWiring,
    store: &mut ParamStore<S>,
) -> Result<(Tensor<S>, UnitTape<S>)> {
    check_in_channels(x, wiring)?;
    let (r_a, bn_a_stats) = match &wiring.bn_a {
        Some(bn) => {
            let (bn_out, stats) = bn_train_layer(store, bn, x)?;
            (Some(relu_forward(&bn_out)), Some(stats))
        }
        None => (None, None),
    };
    let conv_a_in = r_a.as_ref().unwrap_or(x);
    let c1 = conv2d_forward(
        conv_a_in,
        store.get(&kernel_name(&wiring.conv_a))?,
        wiring.spec.first_stride,
        1,
    )?;
    let (bn_b_out, bn_b_stats) = bn_train_layer(store, &wiring.bn_b, &c1)?;
    let r_b = relu_forward(&bn_b_out);
    let f = conv2d_forward(&r_b, store.get(&kernel_name(&wiring.conv_b))?, 1, 1)?;
    let out = add(&shortcut_forward(x, wiring, store)?, &f)?;
    let tape = UnitTape {
        x_in: x.clone(),
        bn_a: bn_a_stats,
        r_a,
        c1,
        bn_b: bn_b_stats,
        r_b,
    };
    Ok((out, tape))
}

/// Backward through one unit. Parameter gradients accumulate into `grads`
/// (keyed by the wiring's names); returns the gradient w.r.t. the unit input.
pub fn unit_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    wiring: &UnitWiring,
    store: &ParamStore<S>,
    tape: &UnitTape<S>,
    grads: &mut ParamStore<S>,
) -> Result<Tensor<S>> {
    let accumulate = |grads: &mut ParamStore<S>, name: &str, delta: &Tensor<S>| -> Result<()> {
        let entry = grads.get_mut(name)?;
        let delta_slice = delta.as_slice();
        for (g, d) in entry.as_mut_slice().iter_mut().zip(delta_slice) {
            *g += *d;
        }
        Ok(())
    };
    let bn_vec_grads =
        |grads: &mut ParamStore<S>, prefix: &str, gg: Vec<S>, gb: Vec<S>| -> Result<()> {
            let c = gg.len();
            accumulate(
                grads,
                &format!("{prefix}.gamma"),
                &Tensor::from_vec([1, c, 1, 1], gg)?,
            )?;
            accumulate(
                grads,
                &format!("{prefix}.beta"),
                &Tensor::from_vec([1, c, 1, 1], gb)?,
            )
        };

    // Shortcut path.
    let mut grad_x = match &wiring.proj {
        Some(proj) => {
            let name = kernel_name(proj);
            let (gx, gk) = conv2d_backward(
                &tape.x_in,
                store.get(&name)?,
                wiring.spec.first_stride,
                0,
                grad_out,
            )?;
            accumulate(grads, &name, &gk)?;
            gx
        }
        None => grad_out.clone(),
    };

    // Residual branch, back to front.
    let kb_name = kernel_name(&wiring.conv_b);
    let (g_rb, gkb) = conv2d_backward(&tape.r_b, store.get(&kb_name)?, 1, 1, grad_out)?;
    accumulate(grads, &kb_name, &gkb)?;
    let g_bnb_out = relu_backward(&tape.r_b, &g_rb)?;
    let gamma_b = store
        .get(&format!("{}.gamma", wiring.bn_b))?
        .as_slice()
        .to_vec();
    let (g_c1, gg_b, gb_b) = batchnorm_backward(&tape.c1, &gamma_b, &tape.bn_b, &g_bnb_out)?;
    bn_vec_grads(grads, &wiring.bn_b, gg_b, gb_b)?;

    let ka_name = kernel_name(&wiring.conv_a);
    let conv_a_in = tape.r_a.as_ref().unwrap_or(&tape.x_in);
    let (g_ra, gka) = conv2d_backward(
        conv_a_in,
        store.get(&ka_name)?,
        wiring.spec.first_stride,
        1,
        &g_c1,
    )?;
    accumulate(grads, &ka_name, &gka)?;

    match (&wiring.bn_a, &tape.r_a, &tape.bn_a) {
        (Some(bn_a), Some(r_a), Some(stats)) => {
            let g_bna_out = relu_backward(r_a, &g_ra)?;
            let gamma_a = store.get(&format!("{bn_a}.gamma"))?.as_slice().to_vec();
            let (g_x_branch, gg_a, gb_a) =
                batchnorm_backward(&tape.x_in, &gamma_a, stats, &g_bna_out)?;
            bn_vec_grads(grads, bn_a, gg_a, gb_a)?;
            grad_x = add(&grad_x, &g_x_branch)?;
        }
        _ => {
            grad_x = add(&grad_x, &g_ra)?;
        }
    }
    Ok(grad_x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::graph::ResidualUnitSpec;
    use crate::model::params::StoreMeta;

    /// Builds a store with He-initialized kernels for a standalone unit.
    pub(crate) fn standalone_store(wiring: &UnitWiring, seed: u64) -> ParamStore<f32> {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(StoreMeta::with_width_scale(1.0));
        for (name, shape) in wiring.param_shapes() {
            let t = if name.ends_with(".kernel") {
                let fan_in = shape[1] * shape[2] * shape[3];
                let std = (2.0 / fan_in as f64).sqrt();
                Tensor::from_fn(shape, |_, _, _, _| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z * std) as f32
                })
            } else if name.ends_with(".gamma") || name.ends_with(".running_var") {
                Tensor::filled(shape, 1.0)
            } else {
                Tensor::zeros(shape)
            };
            store.insert(name, t);
        }
        store
    }

    #[test]
    fn zeroed_branch_is_bit_exact_identity() {
        let spec = ResidualUnitSpec {
            in_channels: 4,
            out_channels: 4,
            first_stride: 1,
            preactivate_first: true,
        };
        let wiring = UnitWiring::standalone("u", spec);
        assert!(wiring.proj.is_none());
        let mut store = standalone_store(&wiring, 3);
        for conv in [&wiring.conv_a, &wiring.conv_b] {
            let name = kernel_name(conv);
            let shape = store.get(&name).unwrap().shape();
            store.insert(name, Tensor::zeros(shape));
        }
        let x = Tensor::<f32>::from_fn([2, 4, 6, 6], |n, c, h, w| {
            0.37 * (n as f32) - 0.11 * (c as f32) + 0.05 * (h as f32) * (w as f32) - 1.2
        });
        let y = unit_forward_infer(&x, &wiring, &store, None).unwrap();
        assert!(y.bit_eq(&x));
    }

    /// Full-unit gradient check at f64: input and every parameter against
    /// central finite differences. The step is small so the FD interval
    /// never straddles a ReLU kink.
    #[test]
    fn random_unit_matches_finite_differences() {
        use crate::verify::{fd_grad, rel_err};
        let spec = ResidualUnitSpec {
            in_channels: 2,
            out_channels: 4,
            first_stride: 2,
            preactivate_first: true,
        };
        let wiring = UnitWiring::standalone("u", spec);
        let params: ParamStore<f64> = standalone_store(&wiring, 5).cast();
        let x = Tensor::<f64>::from_fn([2, 2, 8, 8], |n, c, h, w| {
            (((n * 101 + c * 37 + h * 11 + w * 3) % 41) as f64) / 20.5 - 1.0
        });
        let g = Tensor::<f64>::from_fn([2, 4, 4, 4], |n, c, h, w| {
            (((n * 53 + c * 29 + h * 7 + w) % 23) as f64) / 11.5 - 1.0
        });

        let weighted_out = |p: &ParamStore<f64>, xin: &Tensor<f64>| -> f64 {
            let mut store = p.clone();
            let (y, _) = unit_forward_train(xin, &wiring, &mut store).unwrap();
            y.as_slice()
                .iter()
                .zip(g.as_slice())
                .map(|(a, b)| a * b)
                .sum()
        };

        let mut store = params.clone();
        let (_, tape) = unit_forward_train(&x, &wiring, &mut store).unwrap();
        let mut grads = params.zeroed_learnable();
        let gx = unit_backward(&g, &wiring, &params, &tape, &mut grads).unwrap();

        let step = 1e-5;
        let fd_x = fd_grad(
            |xs| weighted_out(&params, &Tensor::from_vec(x.shape(), xs.to_vec()).unwrap()),
            x.as_slice(),
            step,
        );
        let mut worst = 0.0f64;
        for (a, n) in gx.as_slice().iter().zip(&fd_x) {
            worst = worst.max(rel_err(*a, *n));
        }
        for name in grads.names().map(str::to_string).collect::<Vec<_>>() {
            let len = params.get(&name).unwrap().len();
            for idx in 0..len.min(8) {
                let analytic = grads.get(&name).unwrap().as_slice()[idx];
                let mut p2 = params.clone();
                let base = p2.get(&name).unwrap().as_slice()[idx];
                p2.get_mut(&name).unwrap().as_mut_slice()[idx] = base + step;
                let fp = weighted_out(&p2, &x);
                p2.get_mut(&name).unwrap().as_mut_slice()[idx] = base - step;
                let fm = weighted_out(&p2, &x);
                worst = worst.max(rel_err(analytic, (fp - fm) / (2.0 * step)));
            }
        }
        assert!(worst < 1e-3, "max rel err {worst:e}");
    }

    #[test]
    fn level2_shape_halves_and_widens() {
        let g = crate::model::graph::ModelGraph::new(1.0);
        let units = g.units();
        let store: ParamStore<f32> = g.init_params(5);
        let x = Tensor::<f32>::filled([1, 64, 224, 224], 0.1);
        let y = unit_forward_infer(&x, &units[1], &store, None).unwrap();
        assert_eq!(y.shape(), [1, 128, 112, 112]);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let spec = ResidualUnitSpec {
            in_channels: 4,
            out_channels: 8,
            first_stride: 2,
            preactivate_first: true,
        };
        let wiring = UnitWiring::standalone("u", spec);
        let store = standalone_store(&wiring, 1);
        let x = Tensor::<f32>::zeros([1, 3, 8, 8]);
        assert!(unit_forward_infer(&x, &wiring, &store, None).is_err());
    }

    #[test]
    fn train_and_infer_agree_at_matching_statistics() {
        // With running stats equal to the batch stats, inference must
        // reproduce the training-mode output up to f32 rounding.
        let spec = ResidualUnitSpec {
            in_channels: 2,
            out_channels: 4,
            first_stride: 2,
            preactivate_first: true,
        };
        let wiring = UnitWiring::standalone("u", spec);
        let mut store = standalone_store(&wiring, 9);
        // momentum 0 copies the batch statistics straight into the running slots
        store.meta.bn_momentum = 0.0;
        let x = Tensor::<f32>::from_fn([2, 2, 8, 8], |n, c, h, w| {
            ((n * 31 + c * 17 + h * 5 + w) % 13) as f32 * 0.21 - 1.0
        });
        let (y_train, _) = unit_forward_train(&x, &wiring, &mut store).unwrap();
        let y_infer = unit_forward_infer(&x, &wiring, &store, None).unwrap();
        let max_diff = y_train
            .as_slice()
            .iter()
            .zip(y_infer.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff < 1e-4, "max diff {max_diff}");
    }
}
