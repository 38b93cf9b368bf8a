//! SGD minimization of the mean-squared-error segmentation loss.
//!
//! Plain SGD, no momentum, no weight decay. The learning rate starts at
//! 0.001 and decays by 0.1 every 20 epochs; an epoch consumes 600 sampled
//! tiles by default, so the default 50 epochs see exactly 30,000 samples.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{sample_tiles, Dataset, TILE_SIZE};
use crate::error::{Error, Result};
use crate::model::{is_learnable, Mode, ModelGraph, ParamStore, ResUnet};
use crate::scalar::Scalar;
use crate::tensor::{format_shape, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub initial_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every_epochs: usize,
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub seed: u64,
    /// Multiplies every level's channel width; 1.0 is the full-size network,
    /// smaller values give desk-scale variants.
    pub width_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            initial_lr: 0.001,
            lr_decay_factor: 0.1,
            lr_decay_every_epochs: 20,
            epochs: 50,
            samples_per_epoch: 600,
            seed: 0,
            width_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Error::InvalidArgument { op: "train", what };
        if self.batch_size == 0 {
            return Err(bad("batch_size must be positive".into()));
        }
        if self.initial_lr <= 0.0 {
            return Err(bad(format!(
                "initial_lr must be positive, got {}",
                self.initial_lr
            )));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(bad(format!(
                "lr_decay_factor must be in (0, 1], got {}",
                self.lr_decay_factor
            )));
        }
        if self.lr_decay_every_epochs == 0 {
            return Err(bad("lr_decay_every_epochs must be positive".into()));
        }
        if self.samples_per_epoch == 0 {
            return Err(bad("samples_per_epoch must be positive".into()));
        }
        if self.width_scale <= 0.0 {
            return Err(bad(format!(
                "width_scale must be positive, got {}",
                self.width_scale
            )));
        }
        Ok(())
    }
}

/// One line of the training log (serialized as line-delimited JSON).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub epoch: usize,
    /// Global step index, counted across epochs.
    pub step: usize,
    pub lr: f64,
    pub mse_loss: f64,
    /// Seconds since training started.
    pub wall_time: f64,
}

/// Mean squared error over all elements, with its gradient:
/// `loss = mean((pred - target)^2)`, `grad = 2 (pred - target) / len`.
pub fn mse_loss<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<(f64, Tensor<S>)> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "mse_loss",
            left: format_shape(&pred.shape()),
            right: format_shape(&target.shape()),
        });
    }
    let m = pred.len().max(1) as f64;
    let mut loss = 0.0f64;
    let mut grad = Tensor::zeros(pred.shape());
    for ((p, t), g) in pred
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .zip(grad.as_mut_slice())
    {
        let d = p.as_f64() - t.as_f64();
        loss += d * d;
        *g = S::from_f64(2.0 * d / m);
    }
    Ok((loss / m, grad))
}

/// Learning rate at a given epoch: `initial * factor^(epoch / every)`,
/// computed as repeated reductions so the reference schedule lands on the
/// exact decimal literals (0.001, 0.0001, 0.00001 at epochs 0, 20, 45).
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> f64 {
    let k = epoch / config.lr_decay_every_epochs;
    let mut lr = config.initial_lr;
    for _ in 0..k {
        lr *= config.lr_decay_factor;
    }
    lr
}

/// One plain SGD step: `w -= lr * g` for every learnable tensor. `grads`
/// must carry a gradient for each learnable parameter in `params`.
pub fn sgd_step<S: Scalar>(
    params: &mut ParamStore<S>,
    grads: &ParamStore<S>,
    lr: f64,
) -> Result<()> {
    let names: Vec<String> = params
        .names()
        .filter(|n| is_learnable(n))
        .map(str::to_string)
        .collect();
    let rate = S::from_f64(lr);
    for name in names {
        let grad = grads
            .get(&name)
            .map_err(|_| Error::MissingGradient(name.clone()))?
            .as_slice()
            .to_vec();
        let w = params.get_mut(&name)?;
        for (wv, gv) in w.as_mut_slice().iter_mut().zip(&grad) {
            *wv -= rate * *gv;
        }
    }
    Ok(())
}

/// Assembles a batch of tiles into `(images, masks)` batch tensors.
fn collate(tiles: &[crate::data::TileSample]) -> (Tensor<f32>, Tensor<f32>) {
    let n = tiles.len();
    let mut images = Tensor::zeros([n, 3, TILE_SIZE, TILE_SIZE]);
    let mut masks = Tensor::zeros([n, 1, TILE_SIZE, TILE_SIZE]);
    let img_len = 3 * TILE_SIZE * TILE_SIZE;
    let mask_len = TILE_SIZE * TILE_SIZE;
    for (i, tile) in tiles.iter().enumerate() {
        images.as_mut_slice()[i * img_len..(i + 1) * img_len]
            .copy_from_slice(tile.image.as_slice());
        masks.as_mut_slice()[i * mask_len..(i + 1) * mask_len]
            .copy_from_slice(tile.mask.as_slice());
    }
    (images, masks)
}

/// Runs the full training loop and returns the final parameters plus one
/// log record per step. `on_epoch_end` fires after each epoch with the
/// current parameters (the CLI uses it to write checkpoints).
pub fn train(
    dataset: &Dataset,
    config: &TrainConfig,
    mut on_epoch_end: impl FnMut(usize, &ParamStore<f32>) -> Result<()>,
) -> Result<(ParamStore<f32>, Vec<TrainLogRecord>)> {
    config.validate()?;
    let graph = ModelGraph::new(config.width_scale);
    let mut params: ParamStore<f32> = graph.init_params(config.seed);
    let mut net: ResUnet<f32> = ResUnet::new(graph);

    let steps_per_epoch = config.samples_per_epoch / config.batch_size;
    let total_tiles = config.epochs * steps_per_epoch * config.batch_size;
    // Tile sampling uses its own stream, decoupled from weight init.
    let mut sampler = sample_tiles(dataset, total_tiles, config.seed ^ 0x9E37_79B9_7F4A_7C15);

    let start = Instant::now();
    let mut log = Vec::with_capacity(config.epochs * steps_per_epoch);
    let mut global_step = 0usize;
    for epoch in 0..config.epochs {
        let lr = lr_at_epoch(config, epoch);
        for _ in 0..steps_per_epoch {
            let tiles: Vec<_> = sampler.by_ref().take(config.batch_size).collect();
            let (images, masks) = collate(&tiles);
            let pred = net.forward(&images, &mut params, Mode::Train)?;
            let (loss, grad) = mse_loss(&pred, &masks)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: global_step,
                    loss,
                });
            }
            let grads = net.backward(&grad, &params)?;
            sgd_step(&mut params, &grads, lr)?;
            log.push(TrainLogRecord {
                epoch,
                step: global_step,
                lr,
                mse_loss: loss,
                wall_time: start.elapsed().as_secs_f64(),
            });
            global_step += 1;
        }
        on_epoch_end(epoch, &params)?;
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_scene, SceneSpec};

    #[test]
    fn mse_of_identical_tensors_is_zero() {
        let t = Tensor::<f32>::from_fn([1, 1, 2, 2], |_, _, h, w| (h * 2 + w) as f32 * 0.2);
        let (loss, grad) = mse_loss(&t, &t).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mse_hand_computed_case() {
        let pred = Tensor::<f32>::filled([1, 1, 2, 2], 1.0);
        let target = Tensor::<f32>::zeros([1, 1, 2, 2]);
        let (loss, grad) = mse_loss(&pred, &target).unwrap();
        assert_eq!(loss, 1.0);
        assert!(grad.as_slice().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn mse_shape_mismatch_rejected() {
        let a = Tensor::<f32>::zeros([1, 1, 2, 2]);
        let b = Tensor::<f32>::zeros([1, 1, 2, 3]);
        assert!(mse_loss(&a, &b).is_err());
    }

    #[test]
    fn lr_schedule_reference_points() {
        let config = TrainConfig::default();
        assert_eq!(lr_at_epoch(&config, 0), 0.001);
        assert_eq!(lr_at_epoch(&config, 19), 0.001);
        assert_eq!(lr_at_epoch(&config, 20), 0.0001);
        assert_eq!(lr_at_epoch(&config, 45), 0.00001);
    }

    #[test]
    fn lr_constant_when_factor_is_one() {
        let config = TrainConfig {
            lr_decay_factor: 1.0,
            ..TrainConfig::default()
        };
        for epoch in [0, 5, 100, 1000] {
            assert_eq!(lr_at_epoch(&config, epoch), 0.001);
        }
    }

    #[test]
    fn lr_is_non_increasing() {
        let config = TrainConfig::default();
        let mut last = f64::INFINITY;
        for epoch in 0..200 {
            let lr = lr_at_epoch(&config, epoch);
            assert!(lr <= last);
            last = lr;
        }
    }

    #[test]
    fn sgd_zero_lr_leaves_params_untouched() {
        let graph = ModelGraph::new(0.0625);
        let mut params: ParamStore<f32> = graph.init_params(4);
        let before = params.clone();
        let grads = params.zeroed_learnable().cast::<f32>();
        sgd_step(&mut params, &grads, 0.0).unwrap();
        assert!(params.bit_eq(&before));
    }

    #[test]
    fn sgd_single_scalar_step() {
        let mut params = ParamStore::<f32>::new(Default::default());
        params.insert("w.kernel", Tensor::filled([1, 1, 1, 1], 1.0));
        let mut grads = ParamStore::<f32>::new(Default::default());
        grads.insert("w.kernel", Tensor::filled([1, 1, 1, 1], 2.0));
        sgd_step(&mut params, &grads, 0.1).unwrap();
        let w = params.get("w.kernel").unwrap().as_slice()[0];
        assert!((w - 0.8).abs() < 1e-7);
    }

    #[test]
    fn sgd_missing_gradient_rejected() {
        let mut params = ParamStore::<f32>::new(Default::default());
        params.insert("w.kernel", Tensor::filled([1, 1, 1, 1], 1.0));
        let grads = ParamStore::<f32>::new(Default::default());
        assert!(matches!(
            sgd_step(&mut params, &grads, 0.1),
            Err(Error::MissingGradient(_))
        ));
    }

    fn tiny_dataset(count: usize) -> Dataset {
        let spec = SceneSpec {
            width: 224,
            height: 224,
            ..SceneSpec::default()
        };
        Dataset::new(
            (0..count)
                .map(|i| generate_synthetic_scene(&spec, 1000 + i as u64))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let ds = tiny_dataset(2);
        let config = TrainConfig {
            epochs: 0,
            width_scale: 0.0625,
            seed: 3,
            ..TrainConfig::default()
        };
        let (params, log) = train(&ds, &config, |_, _| Ok(())).unwrap();
        let init: ParamStore<f32> = ModelGraph::new(0.0625).init_params(3);
        assert!(params.bit_eq(&init));
        assert!(log.is_empty());
    }

    #[test]
    fn log_length_matches_bookkeeping() {
        let ds = tiny_dataset(2);
        let config = TrainConfig {
            epochs: 2,
            samples_per_epoch: 10,
            batch_size: 4,
            width_scale: 0.03,
            seed: 1,
            ..TrainConfig::default()
        };
        let (_, log) = train(&ds, &config, |_, _| Ok(())).unwrap();
        // floor(10 / 4) = 2 steps per epoch
        assert_eq!(log.len(), 2 * 2);
        assert_eq!(log.last().unwrap().epoch, 1);
        assert!(log
            .iter()
            .all(|r| r.mse_loss.is_finite() && r.mse_loss >= 0.0));
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let ds = tiny_dataset(2);
        let config = TrainConfig {
            epochs: 1,
            samples_per_epoch: 8,
            batch_size: 4,
            width_scale: 0.03,
            seed: 11,
            ..TrainConfig::default()
        };
        let (a, log_a) = train(&ds, &config, |_, _| Ok(())).unwrap();
        let (b, log_b) = train(&ds, &config, |_, _| Ok(())).unwrap();
        assert!(a.bit_eq(&b));
        assert_eq!(
            log_a
                .iter()
                .map(|r| r.mse_loss.to_bits())
                .collect::<Vec<_>>(),
            log_b
                .iter()
                .map(|r| r.mse_loss.to_bits())
                .collect::<Vec<_>>()
        );
    }

    #[test]
    fn loss_decreases_after_one_small_step() {
        // Strict decrease on a fixed batch under a sufficiently small lr.
        let ds = tiny_dataset(1);
        for seed in 0..10 {
            let graph = ModelGraph::new(0.0625);
            let mut params: ParamStore<f32> = graph.init_params(seed);
            let mut net: ResUnet<f32> = ResUnet::new(graph);
            let tiles: Vec<_> = sample_tiles(&ds, 2, seed).collect();
            let (images, masks) = collate(&tiles);

            let pred = net.forward(&images, &mut params, Mode::Train).unwrap();
            let (loss_before, grad) = mse_loss(&pred, &masks).unwrap();
            let grads = net.backward(&grad, &params).unwrap();
            sgd_step(&mut params, &grads, 1e-4).unwrap();

            let pred2 = net.forward(&images, &mut params, Mode::Train).unwrap();
            let (loss_after, _) = mse_loss(&pred2, &masks).unwrap();
            assert!(
                loss_after < loss_before,
                "seed {seed}: {loss_after} !< {loss_before}"
            );
        }
    }

    #[test]
    fn default_protocol_consumes_30000_samples() {
        let config = TrainConfig::default();
        assert_eq!(config.epochs * config.samples_per_epoch, 30_000);
        assert_eq!(config.batch_size, 8);
        assert_eq!(config.initial_lr, 0.001);
        assert_eq!(config.lr_decay_every_epochs, 20);
    }

    #[test]
    fn config_validation_names_out_of_range_fields() {
        let bad = TrainConfig {
            lr_decay_factor: 1.5,
            ..TrainConfig::default()
        };
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("lr_decay_factor"), "{msg}");

        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad
            .validate()
            .unwrap_err()
            .to_string()
            .contains("batch_size"));

        let bad = TrainConfig {
            initial_lr: -0.1,
            ..TrainConfig::default()
        };
        assert!(bad
            .validate()
            .unwrap_err()
            .to_string()
            .contains("initial_lr"));

        let bad = TrainConfig {
            width_scale: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad
            .validate()
            .unwrap_err()
            .to_string()
            .contains("width_scale"));
    }

    #[test]
    fn divergence_aborts_with_the_offending_step() {
        // A learning rate beyond f32 range turns the first update into
        // inf/NaN weights; the loop must stop with a non-finite-loss error
        // instead of training on garbage.
        let ds = tiny_dataset(1);
        let config = TrainConfig {
            epochs: 2,
            samples_per_epoch: 16,
            batch_size: 4,
            width_scale: 0.03,
            seed: 2,
            initial_lr: 1e40,
            ..TrainConfig::default()
        };
        match train(&ds, &config, |_, _| Ok(())) {
            Err(Error::NonFiniteLoss { step, loss, .. }) => {
                assert!(!loss.is_finite());
                assert!(step >= 1, "first step's loss is finite by construction");
            }
            Err(other) => panic!("unexpected error: {other}"),
            Ok(_) => panic!("training completed despite a divergent learning rate"),
        }
    }
}
