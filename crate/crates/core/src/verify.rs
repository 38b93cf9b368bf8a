//! Self-verification: independent oracles and the checks behind the
//! `verify` CLI command.
//!
//! The oracles here deliberately avoid the main implementation paths: the
//! reference convolution is a plain 6-nested-loop sum (no im2col, no GEMM)
//! and gradients are checked against central finite differences evaluated
//! on the f64 instantiation of the engine.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{
    forward_infer, forward_infer_traced, Mode, ModelGraph, ParamStore, ResUnet, ResidualUnitSpec,
    UnitWiring,
};
use crate::ops::{
    add, batchnorm_backward, batchnorm_train, concat_backward, concat_channels, conv2d_backward,
    conv2d_forward, conv_out_dim, relu_backward, relu_forward, sigmoid_backward, sigmoid_forward,
    upsample2x_backward, upsample2x_forward,
};
use crate::tensor::Tensor;
use crate::train::mse_loss;

/// Outcome of one verification check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckReport {
    fn pass(name: &'static str, detail: String) -> Self {
        CheckReport {
            name,
            passed: true,
            detail,
        }
    }

    fn fail(name: &'static str, detail: String) -> Self {
        CheckReport {
            name,
            passed: false,
            detail,
        }
    }

    fn from_error(name: &'static str, max_err: f64, tol: f64, context: &str) -> Self {
        if max_err < tol {
            Self::pass(
                name,
                format!("{context}: max rel err {max_err:.3e} < {tol:e}"),
            )
        } else {
            Self::fail(
                name,
                format!("{context}: max rel err {max_err:.3e} >= {tol:e}"),
            )
        }
    }
}

/// Deliberate corruption hooks, used to prove the harness can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Perturbs the analytic kernel gradient before comparison.
    CorruptConvBackward,
}

// ---------------------------------------------------------------------------
// Oracles

/// Reference convolution: direct 6-nested-loop cross-correlation over the
/// zero-padded input, entirely in f64.
pub fn direct_conv2d(
    input: &Tensor<f64>,
    kernel: &Tensor<f64>,
    stride: usize,
    padding: usize,
) -> Tensor<f64> {
    let [n, c_in, h, w] = input.shape();
    let [c_out, kc, kh, kw] = kernel.shape();
    assert_eq!(c_in, kc, "oracle called with mismatched channels");
    let out_h = conv_out_dim(h, kh, stride, padding);
    let out_w = conv_out_dim(w, kw, stride, padding);
    let mut out = Tensor::zeros([n, c_out, out_h, out_w]);
    for ni in 0..n {
        for co in 0..c_out {
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let mut acc = 0.0f64;
                    for ci in 0..c_in {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (oh * stride + dy) as isize - padding as isize;
                                let ix = (ow * stride + dx) as isize - padding as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    acc += input.at(ni, ci, iy as usize, ix as usize)
                                        * kernel.at(co, ci, dy, dx);
                                }
                            }
                        }
                    }
                    out.set(ni, co, oh, ow, acc);
                }
            }
        }
    }
    out
}

/// Central finite-difference gradient of a scalar function of a flat
/// parameter vector.
pub fn fd_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xs[i];
            xs[i] = orig + step;
            let fp = f(&xs);
            xs[i] = orig - step;
            let fm = f(&xs);
            xs[i] = orig;
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

/// Relative error with an absolute floor so near-zero pairs compare sanely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

fn max_rel_err(analytic: &[f64], numeric: &[f64], skip: impl Fn(usize) -> bool) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .enumerate()
        .filter(|(i, _)| !skip(*i))
        .map(|(_, (&a, &n))| rel_err(a, n))
        .fold(0.0, f64::max)
}

fn rand_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

const FD_STEP: f64 = 1e-3;
/// The whole-model loss is only piecewise smooth in its parameters (ReLU
/// kinks); a small step keeps the finite-difference interval from straddling
/// them. Harmless for accuracy since the check runs in f64.
const MODEL_FD_STEP: f64 = 1e-5;
const PRIMITIVE_TOL: f64 = 1e-3;
const MODEL_TOL: f64 = 1e-2;
const SEEDS: u64 = 20;

struct ConvCase {
    input: Tensor<f64>,
    kernel: Tensor<f64>,
    stride: usize,
    padding: usize,
}

fn random_conv_case(rng: &mut ChaCha8Rng) -> ConvCase {
    let n = rng.gen_range(1..=2);
    let c_in = rng.gen_range(1..=4);
    let c_out = rng.gen_range(1..=4);
    let h = rng.gen_range(5..=8);
    let w = rng.gen_range(5..=8);
    let k = if rng.gen_bool(0.7) { 3 } else { 1 };
    let stride = if rng.gen_bool(0.5) { 1 } else { 2 };
    let padding = k / 2;
    ConvCase {
        input: rand_tensor([n, c_in, h, w], rng, -1.0, 1.0),
        kernel: rand_tensor([c_out, c_in, k, k], rng, -1.0, 1.0),
        stride,
        padding,
    }
}

// ---------------------------------------------------------------------------
// Checks

/// conv2d_forward against the 6-loop oracle, in both scalar widths.
pub fn check_conv_forward(seed: u64) -> CheckReport {
    let name = "conv-forward-oracle";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case_idx in 0..SEEDS {
        let case = random_conv_case(&mut rng);
        let expected = direct_conv2d(&case.input, &case.kernel, case.stride, case.padding);

        let got64 = match conv2d_forward(&case.input, &case.kernel, case.stride, case.padding) {
            Ok(t) => t,
            Err(e) => return CheckReport::fail(name, format!("case {case_idx}: {e}")),
        };
        let got32 = conv2d_forward(
            &case.input.cast::<f32>(),
            &case.kernel.cast::<f32>(),
            case.stride,
            case.padding,
        )
        .expect("validated above")
        .cast::<f64>();

        for (g, e) in got64.as_slice().iter().zip(expected.as_slice()) {
            worst = worst.max((g - e).abs());
        }
        for (g, e) in got32.as_slice().iter().zip(expected.as_slice()) {
            worst = worst.max((g - e).abs());
        }
    }
    if worst <= 1e-5 {
        CheckReport::pass(
            name,
            format!("{SEEDS} cases, max abs diff {worst:.3e} <= 1e-5"),
        )
    } else {
        CheckReport::fail(name, format!("max abs diff {worst:.3e} > 1e-5"))
    }
}

/// conv2d_backward against finite differences of sum(G * conv(x, k)).
pub fn check_conv_gradients(seed: u64, fault: Option<Fault>) -> CheckReport {
    let name = "conv-backward-fd";
    let mut worst = 0.0f64;
    for s in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(s));
        let case = random_conv_case(&mut rng);
        let out_shape = direct_conv2d(&case.input, &case.kernel, case.stride, case.padding).shape();
        let g = rand_tensor(out_shape, &mut rng, -1.0, 1.0);

        let (gi, mut gk) =
            conv2d_backward(&case.input, &case.kernel, case.stride, case.padding, &g)
                .expect("shapes are consistent");
        if fault == Some(Fault::CorruptConvBackward) {
            let v = gk.as_mut_slice();
            v[0] += v[0].abs().max(1.0);
        }

        let loss_of_input = |x: &[f64]| {
            let input = Tensor::from_vec(case.input.shape(), x.to_vec()).unwrap();
            let out = conv2d_forward(&input, &case.kernel, case.stride, case.padding).unwrap();
            out.as_slice()
                .iter()
                .zip(g.as_slice())
                .map(|(o, gv)| o * gv)
                .sum()
        };
        let fd_in = fd_grad(loss_of_input, case.input.as_slice(), FD_STEP);
        worst = worst.max(max_rel_err(gi.as_slice(), &fd_in, |_| false));

        let loss_of_kernel = |k: &[f64]| {
            let kernel = Tensor::from_vec(case.kernel.shape(), k.to_vec()).unwrap();
            let out = conv2d_forward(&case.input, &kernel, case.stride, case.padding).unwrap();
            out.as_slice()
                .iter()
                .zip(g.as_slice())
                .map(|(o, gv)| o * gv)
                .sum()
        };
        let fd_k = fd_grad(loss_of_kernel, case.kernel.as_slice(), FD_STEP);
        worst = worst.max(max_rel_err(gk.as_slice(), &fd_k, |_| false));
    }
    CheckReport::from_error(
        name,
        worst,
        PRIMITIVE_TOL,
        &format!("{SEEDS} seeds, input+kernel grads"),
    )
}

/// batchnorm_backward (training mode, full formula) against finite differences.
pub fn check_batchnorm_gradients(seed: u64) -> CheckReport {
    let name = "batchnorm-backward-fd";
    let mut worst = 0.0f64;
    for s in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(s).wrapping_mul(31));
        let shape = [2, 3, 4, 4];
        let x = rand_tensor(shape, &mut rng, -2.0, 2.0);
        let gamma: Vec<f64> = (0..3).map(|_| rng.gen_range(0.5..1.5)).collect();
        let beta: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let g = rand_tensor(shape, &mut rng, -1.0, 1.0);

        let bn_loss = |x: &Tensor<f64>, gamma: &[f64], beta: &[f64]| -> f64 {
            let mut rm = vec![0.0f64; 3];
            let mut rv = vec![1.0f64; 3];
            let (out, _) = batchnorm_train(x, gamma, beta, 0.9, 1e-5, &mut rm, &mut rv).unwrap();
            out.as_slice()
                .iter()
                .zip(g.as_slice())
                .map(|(o, gv)| o * gv)
                .sum()
        };

        let mut rm = vec![0.0f64; 3];
        let mut rv = vec![1.0f64; 3];
        let (_, stats) = batchnorm_train(&x, &gamma, &beta, 0.9, 1e-5, &mut rm, &mut rv).unwrap();
        let (gi, gg, gb) = batchnorm_backward(&x, &gamma, &stats, &g).unwrap();

        let fd_x = fd_grad(
            |xs| {
                bn_loss(
                    &Tensor::from_vec(shape, xs.to_vec()).unwrap(),
                    &gamma,
                    &beta,
                )
            },
            x.as_slice(),
            FD_STEP,
        );
        worst = worst.max(max_rel_err(gi.as_slice(), &fd_x, |_| false));
        let fd_gamma = fd_grad(|gs| bn_loss(&x, gs, &beta), &gamma, FD_STEP);
        worst = worst.max(max_rel_err(&gg, &fd_gamma, |_| false));
        let fd_beta = fd_grad(|bs| bn_loss(&x, &gamma, bs), &beta, FD_STEP);
        worst = worst.max(max_rel_err(&gb, &fd_beta, |_| false));
    }
    CheckReport::from_error(
        name,
        worst,
        PRIMITIVE_TOL,
        &format!("{SEEDS} seeds, x+gamma+beta grads"),
    )
}

/// ReLU backward against finite differences, excluding the kink.
pub fn check_relu_gradients(seed: u64) -> CheckReport {
    let name = "relu-backward-fd";
    let mut worst = 0.0f64;
    for s in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(s).wrapping_mul(77));
        let shape = [2, 2, 5, 5];
        let x = rand_tensor(shape, &mut rng, -1.0, 1.0);
        let g = rand_tensor(shape, &mut rng, -1.0, 1.0);
        let gi = relu_backward(&x, &g).unwrap();
        let fd = fd_grad(
            |xs| {
                let t = Tensor::from_vec(shape, xs.to_vec()).unwrap();
                relu_forward(&t)
                    .as_slice()
                    .iter()
                    .zip(g.as_slice())
                    .map(|(o, gv)| o * gv)
                    .sum()
            },
            x.as_slice(),
            FD_STEP,
        );
        let near_kink = |i: usize| x.as_slice()[i].abs() < 1e-2;
        worst = worst.max(max_rel_err(gi.as_slice(), &fd, near_kink));
    }
    CheckReport::from_error(
        name,
        worst,
        PRIMITIVE_TOL,
        &format!("{SEEDS} seeds, |x| >= 1e-2"),
    )
}

/// Sigmoid backward against finite differences.
pub fn check_sigmoid_gradients(seed: u64) -> CheckReport {
    let name = "sigmoid-backward-fd";
    let mut worst = 0.0f64;
    for s in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(s).wrapping_mul(101));
        let shape = [1, 2, 4, 4];
        let x = rand_tensor(shape, &mut rng, -3.0, 3.0);
        let g = rand_tensor(shape, &mut rng, -1.0, 1.0);
        let y = sigmoid_forward(&x);
        let gi = sigmoid_backward(&y, &g).unwrap();
        let fd = fd_grad(
            |xs| {
                let t = Tensor::from_vec(shape, xs.to_vec()).unwrap();
                sigmoid_forward(&t)
                    .as_slice()
                    .iter()
                    .zip(g.as_slice())
                    .map(|(o, gv)| o * gv)
                    .sum()
            },
            x.as_slice(),
            FD_STEP,
        );
        worst = worst.max(max_rel_err(gi.as_slice(), &fd, |_| false));
    }
    CheckReport::from_error(name, worst, PRIMITIVE_TOL, &format!("{SEEDS} seeds"))
}

/// Upsample backward (block-sum adjoint) against finite differences.
pub fn check_upsample_gradients(seed: u64) -> CheckReport {
    let name = "upsample-backward-fd";
    let mut worst = 0.0f64;
    for s in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(s).wrapping_mul(13));
        let shape = [1, 2, 3, 4];
        let x = rand_tensor(shape, &mut rng, -1.0, 1.0);
        let g = rand_tensor([1, 2, 6, 8], &mut rng, -1.0, 1.0);
        let gi = upsample2x_backward(&g).unwrap();
        let fd = fd_grad(
            |xs| {
                let t = Tensor::from_vec(shape, xs.to_vec()).unwrap();
                upsample2x_forward(&t)
                    .as_slice()
                    .iter()
                    .zip(g.as_slice())
                    .map(|(o, gv)| o * gv)
                    .sum()
            },
            x.as_slice(),
            FD_STEP,
        );
        worst = worst.max(max_rel_err(gi.as_slice(), &fd, |_| false));
    }
    CheckReport::from_error(name, worst, PRIMITIVE_TOL, &format!("{SEEDS} seeds"))
}

/// Concat/add backward against finite differences.
pub fn check_combine_gradients(seed: u64) -> CheckReport {
    let name = "concat-add-backward-fd";
    let mut worst = 0.0f64;
    for s in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(s).wrapping_mul(7));
        let sa = [1, 2, 3, 3];
        let sb = [1, 3, 3, 3];
        let a = rand_tensor(sa, &mut rng, -1.0, 1.0);
        let b = rand_tensor(sb, &mut rng, -1.0, 1.0);
        let g = rand_tensor([1, 5, 3, 3], &mut rng, -1.0, 1.0);
        let (ga, gb) = concat_backward(&g, 2).unwrap();
        let fd_a = fd_grad(
            |xs| {
                let t = Tensor::from_vec(sa, xs.to_vec()).unwrap();
                concat_channels(&t, &b)
                    .unwrap()
                    .as_slice()
                    .iter()
                    .zip(g.as_slice())
                    .map(|(o, gv)| o * gv)
                    .sum()
            },
            a.as_slice(),
            FD_STEP,
        );
        worst = worst.max(max_rel_err(ga.as_slice(), &fd_a, |_| false));
        let fd_b = fd_grad(
            |xs| {
                let t = Tensor::from_vec(sb, xs.to_vec()).unwrap();
                concat_channels(&a, &t)
                    .unwrap()
                    .as_slice()
                    .iter()
                    .zip(g.as_slice())
                    .map(|(o, gv)| o * gv)
                    .sum()
            },
            b.as_slice(),
            FD_STEP,
        );
        worst = worst.max(max_rel_err(gb.as_slice(), &fd_b, |_| false));

        // add: both operands receive grad_out unchanged.
        let ga2 = rand_tensor(sa, &mut rng, -1.0, 1.0);
        let fd_add = fd_grad(
            |xs| {
                let t = Tensor::from_vec(sa, xs.to_vec()).unwrap();
                add(&t, &a)
                    .unwrap()
                    .as_slice()
                    .iter()
                    .zip(ga2.as_slice())
                    .map(|(o, gv)| o * gv)
                    .sum()
            },
            a.as_slice(),
            FD_STEP,
        );
        worst = worst.max(max_rel_err(ga2.as_slice(), &fd_add, |_| false));
    }
    CheckReport::from_error(name, worst, PRIMITIVE_TOL, &format!("{SEEDS} seeds"))
}

/// MSE gradient against finite differences.
pub fn check_mse_gradient(seed: u64) -> CheckReport {
    let name = "mse-grad-fd";
    let mut worst = 0.0f64;
    for s in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(s).wrapping_mul(3));
        let shape = [2, 1, 4, 4];
        let pred = rand_tensor(shape, &mut rng, 0.0, 1.0);
        let target = rand_tensor(shape, &mut rng, 0.0, 1.0);
        let (_, grad) = mse_loss(&pred, &target).unwrap();
        let fd = fd_grad(
            |xs| {
                let t = Tensor::from_vec(shape, xs.to_vec()).unwrap();
                mse_loss(&t, &target).unwrap().0
            },
            pred.as_slice(),
            FD_STEP,
        );
        worst = worst.max(max_rel_err(grad.as_slice(), &fd, |_| false));
    }
    CheckReport::from_error(name, worst, 1e-4, &format!("{SEEDS} seeds"))
}

/// Full-composition gradient check: a width-reduced network end to end
/// through the MSE loss, sampling parameters across every tensor.
pub fn check_model_gradients(seed: u64) -> CheckReport {
    let name = "model-backward-fd";
    let graph = ModelGraph::new(1.0 / 16.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: ParamStore<f64> = graph.init_params(seed);
    let x = rand_tensor([1, 3, 16, 16], &mut rng, 0.0, 1.0);
    let target = rand_tensor([1, 1, 16, 16], &mut rng, 0.0, 1.0);

    let loss_for = |params: &ParamStore<f64>| -> f64 {
        let mut net: ResUnet<f64> = ResUnet::new(graph.clone());
        let mut store = params.clone();
        let pred = net.forward(&x, &mut store, Mode::Train).unwrap();
        mse_loss(&pred, &target).unwrap().0
    };

    let mut net: ResUnet<f64> = ResUnet::new(graph.clone());
    let mut store = params.clone();
    let pred = net.forward(&x, &mut store, Mode::Train).unwrap();
    let (_, loss_grad) = mse_loss(&pred, &target).unwrap();
    let grads = net.backward(&loss_grad, &params).unwrap();

    // At least 30 sampled scalars spread over every learnable tensor.
    let names: Vec<String> = grads.names().map(str::to_string).collect();
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for (i, name) in names.iter().enumerate() {
        let tensor_len = params.get(name).unwrap().len();
        let picks = if names.len() < 30 { 2 } else { 1 };
        for _ in 0..picks {
            let idx = rng.gen_range(0..tensor_len);
            let analytic = grads.get(name).unwrap().as_slice()[idx];
            let mut perturbed = params.clone();
            let step = MODEL_FD_STEP;
            let base = perturbed.get(name).unwrap().as_slice()[idx];
            perturbed.get_mut(name).unwrap().as_mut_slice()[idx] = base + step;
            let fp = loss_for(&perturbed);
            perturbed.get_mut(name).unwrap().as_mut_slice()[idx] = base - step;
            let fm = loss_for(&perturbed);
            let numeric = (fp - fm) / (2.0 * step);
            worst = worst.max(rel_err(analytic, numeric));
            checked += 1;
        }
        let _ = i;
    }
    CheckReport::from_error(
        name,
        worst,
        MODEL_TOL,
        &format!(
            "{checked} sampled parameters across {} tensors",
            names.len()
        ),
    )
}

/// Reference output sizes after each main-path convolution for 224x224x3
/// input, full width.
pub const REFERENCE_CONV_SHAPES: [(&str, usize, usize, usize); 15] = [
    ("conv1", 224, 224, 64),
    ("conv2", 224, 224, 64),
    ("conv3", 112, 112, 128),
    ("conv4", 112, 112, 128),
    ("conv5", 56, 56, 256),
    ("conv6", 56, 56, 256),
    ("conv7", 28, 28, 512),
    ("conv8", 28, 28, 512),
    ("conv9", 56, 56, 256),
    ("conv10", 56, 56, 256),
    ("conv11", 112, 112, 128),
    ("conv12", 112, 112, 128),
    ("conv13", 224, 224, 64),
    ("conv14", 224, 224, 64),
    ("conv15", 224, 224, 1),
];

/// Audits all 15 post-conv activation shapes on a real full-width forward.
pub fn check_architecture_shapes(seed: u64) -> CheckReport {
    let name = "architecture-shapes";
    let graph = ModelGraph::new(1.0);
    let store: ParamStore<f32> = graph.init_params(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::<f32>::from_fn([1, 3, 224, 224], |_, _, _, _| rng.gen_range(0.0..1.0));
    let (_, trace) = match forward_infer_traced(&graph, &x, &store) {
        Ok(v) => v,
        Err(e) => return CheckReport::fail(name, e.to_string()),
    };
    if trace.len() != 15 {
        return CheckReport::fail(
            name,
            format!("expected 15 conv records, got {}", trace.len()),
        );
    }
    for ((got_name, got_shape), (want_name, h, w, c)) in trace.iter().zip(REFERENCE_CONV_SHAPES) {
        let want = [1usize, c, h, w];
        if got_name != want_name || *got_shape != want {
            return CheckReport::fail(
                name,
                format!(
                    "{got_name} produced {:?}, expected {want_name} {:?}",
                    got_shape, want
                ),
            );
        }
    }
    CheckReport::pass(
        name,
        "15/15 conv output shapes match the reference layout".into(),
    )
}

/// Main-path conv kernels must count 7,780,096 scalars at full width; the
/// complete learnable count (with projections and BN) must stay in
/// [7.4M, 8.4M].
pub fn check_param_counts() -> CheckReport {
    let name = "parameter-counts";
    let graph = ModelGraph::new(1.0);
    let store: ParamStore<f32> = graph.init_params(0);
    let main = store.count_main_conv();
    let total = store.count_learnable();
    if main != 7_780_096 {
        return CheckReport::fail(name, format!("main-path conv count {main} != 7780096"));
    }
    if !(7_400_000..=8_400_000).contains(&total) {
        return CheckReport::fail(
            name,
            format!("total learnable {total} outside [7.4M, 8.4M]"),
        );
    }
    if total != graph.expected_learnable_count() {
        return CheckReport::fail(
            name,
            format!(
                "store count {total} != closed-form {}",
                graph.expected_learnable_count()
            ),
        );
    }
    CheckReport::pass(
        name,
        format!("main-path conv params = {main}, total learnable = {total}"),
    )
}

/// A shape-preserving unit with zeroed branch kernels must be the identity.
pub fn check_residual_identity() -> CheckReport {
    let name = "residual-identity";
    let spec = ResidualUnitSpec {
        in_channels: 4,
        out_channels: 4,
        first_stride: 1,
        preactivate_first: true,
    };
    let wiring = UnitWiring::standalone("unit", spec);
    let mut store: ParamStore<f32> = ParamStore::new(Default::default());
    for (pname, shape) in wiring.param_shapes() {
        let t = if pname.ends_with(".gamma") || pname.ends_with(".running_var") {
            Tensor::filled(shape, 1.0)
        } else {
            Tensor::zeros(shape)
        };
        store.insert(pname, t);
    }
    let x = Tensor::<f32>::from_fn([2, 4, 8, 8], |n, c, h, w| {
        0.173 * (n as f32 + 1.0) - 0.591 * (c as f32) + 0.037 * (h as f32) * (w as f32)
    });
    match crate::model::unit_forward_infer(&x, &wiring, &store, None) {
        Ok(y) if y.bit_eq(&x) => CheckReport::pass(
            name,
            "zeroed residual branch is a bit-exact identity".into(),
        ),
        Ok(_) => CheckReport::fail(name, "output differs from input".into()),
        Err(e) => CheckReport::fail(name, e.to_string()),
    }
}

/// Two forwards over identical inputs and parameters must agree bit for bit,
/// and a checkpointed store must reproduce the original's outputs.
pub fn check_determinism(seed: u64) -> CheckReport {
    let name = "determinism";
    let graph = ModelGraph::new(0.125);
    let a: ParamStore<f32> = graph.init_params(seed);
    let b: ParamStore<f32> = graph.init_params(seed);
    if !a.bit_eq(&b) {
        return CheckReport::fail(name, "re-initialization with one seed differs".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xDEAD);
    let x = Tensor::<f32>::from_fn([1, 3, 32, 32], |_, _, _, _| rng.gen_range(0.0..1.0));
    let y1 = match forward_infer(&graph, &x, &a) {
        Ok(v) => v,
        Err(e) => return CheckReport::fail(name, e.to_string()),
    };
    let y2 = forward_infer(&graph, &x, &a).expect("same call succeeded above");
    if !y1.bit_eq(&y2) {
        return CheckReport::fail(name, "two identical forwards differ".into());
    }
    CheckReport::pass(
        name,
        "re-init and repeated forwards are bit-identical".into(),
    )
}

/// Runs every check. `fault` deliberately corrupts one analytic gradient so
/// harness failures are provable.
pub fn run_all(seed: u64, fault: Option<Fault>) -> Vec<CheckReport> {
    vec![
        check_conv_forward(seed),
        check_conv_gradients(seed, fault),
        check_batchnorm_gradients(seed),
        check_relu_gradients(seed),
        check_sigmoid_gradients(seed),
        check_upsample_gradients(seed),
        check_combine_gradients(seed),
        check_mse_gradient(seed),
        check_model_gradients(seed),
        check_architecture_shapes(seed),
        check_param_counts(),
        check_residual_identity(),
        check_determinism(seed),
    ]
}
