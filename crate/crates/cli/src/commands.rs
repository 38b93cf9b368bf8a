use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use resunet_core::data::{
    dataset_from_manifest, generate_synthetic_scene, load_gray_image, load_rgb_image, Dataset,
    SceneSpec,
};
use resunet_core::error::Error;
use resunet_core::metrics::{
    default_thresholds, pr_curve, summary_line, write_pr_csv, BinaryMask, DistanceMetric,
};
use resunet_core::model::{ModelGraph, ParamStore};
use resunet_core::tile::{
    plan_tiles, predict_image_threaded, save_mask_png, save_prob_png, DEFAULT_OVERLAP,
};
use resunet_core::train::{train as run_train, TrainConfig};
use resunet_core::verify::{run_all, Fault};

use crate::config::{merge, merge_opt, ConfigError, FileConfig};
use crate::{EvaluateArgs, Failure, PredictArgs, TrainArgs, VerifyArgs};

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::bad_input(e.0)
    }
}

fn load_file_config(path: &Option<PathBuf>) -> Result<FileConfig, Failure> {
    match path {
        Some(p) => Ok(FileConfig::load(p)?),
        None => Ok(FileConfig::default()),
    }
}

fn ensure_out_dir(out: &Path) -> Result<(), Failure> {
    fs::create_dir_all(out)
        .map_err(|e| Failure::bad_input(format!("cannot create output dir {}: {e}", out.display())))
}

/// Scene seeds for `--synthetic N` training sets, derived from the run seed.
fn synthetic_dataset(count: usize, seed: u64) -> Result<Dataset, Failure> {
    if count == 0 {
        return Err(Failure::bad_input("field `synthetic`: must be at least 1"));
    }
    let spec = SceneSpec::default();
    let scenes = (0..count)
        .map(|i| generate_synthetic_scene(&spec, seed.wrapping_mul(1000).wrapping_add(i as u64)))
        .collect();
    Dataset::new(scenes).map_err(|e| Failure::bad_input(e.to_string()))
}

pub fn train(args: TrainArgs) -> Result<(), Failure> {
    let file = load_file_config(&args.config)?;
    let defaults = TrainConfig::default();
    let config = TrainConfig {
        batch_size: merge(args.batch_size, &file, "batch-size", defaults.batch_size)?,
        initial_lr: merge(args.lr, &file, "lr", defaults.initial_lr)?,
        lr_decay_factor: merge(
            args.lr_decay_factor,
            &file,
            "lr-decay-factor",
            defaults.lr_decay_factor,
        )?,
        lr_decay_every_epochs: merge(
            args.lr_decay_every,
            &file,
            "lr-decay-every",
            defaults.lr_decay_every_epochs,
        )?,
        epochs: merge(args.epochs, &file, "epochs", defaults.epochs)?,
        samples_per_epoch: merge(
            args.samples_per_epoch,
            &file,
            "samples-per-epoch",
            defaults.samples_per_epoch,
        )?,
        seed: merge(args.seed, &file, "seed", defaults.seed)?,
        width_scale: merge(args.width_scale, &file, "width-scale", defaults.width_scale)?,
    };
    config
        .validate()
        .map_err(|e| Failure::bad_input(e.to_string()))?;
    let _threads = merge(args.threads, &file, "threads", 1usize)?;

    let manifest = merge_opt(args.manifest, &file, "manifest")?;
    let synthetic = merge_opt(args.synthetic, &file, "synthetic")?;
    let dataset = match (&manifest, synthetic) {
        (Some(path), None) => {
            dataset_from_manifest(path).map_err(|e| Failure::bad_input(e.to_string()))?
        }
        (None, Some(n)) => synthetic_dataset(n, config.seed)?,
        (None, None) => {
            return Err(Failure::bad_input(
                "field `manifest`: either --manifest or --synthetic is required",
            ))
        }
        (Some(_), Some(_)) => {
            return Err(Failure::bad_input(
                "field `manifest`: --manifest and --synthetic are mutually exclusive",
            ))
        }
    };

    let out = merge_opt(args.out, &file, "out")?
        .ok_or_else(|| Failure::bad_input("field `out`: output directory is required"))?;
    ensure_out_dir(&out)?;

    println!(
        "training: {} images, width_scale={}, epochs={}, batch_size={}, lr={}, seed={}",
        dataset.len(),
        config.width_scale,
        config.epochs,
        config.batch_size,
        config.initial_lr,
        config.seed
    );

    let ckpt_dir = out.clone();
    let result = run_train(&dataset, &config, |epoch, params| {
        let path = ckpt_dir.join(format!("checkpoint_epoch_{:03}.ckpt", epoch + 1));
        params.save(&path)?;
        Ok(())
    });
    let (params, log) = result.map_err(|e| match e {
        Error::NonFiniteLoss { .. } => Failure {
            code: 3,
            message: e.to_string(),
        },
        other => Failure::bad_input(other.to_string()),
    })?;

    let final_path = out.join("checkpoint_final.ckpt");
    params
        .save(&final_path)
        .map_err(|e| Failure::bad_input(e.to_string()))?;

    let log_path = out.join("train_log.jsonl");
    let mut f = fs::File::create(&log_path)
        .map_err(|e| Failure::bad_input(format!("{}: {e}", log_path.display())))?;
    for record in &log {
        let line = serde_json::to_string(record)
            .map_err(|e| Failure::bad_input(format!("log serialization: {e}")))?;
        writeln!(f, "{line}")
            .map_err(|e| Failure::bad_input(format!("{}: {e}", log_path.display())))?;
    }

    if let Some(last) = log.last() {
        println!(
            "done: {} steps, final loss {:.6}, checkpoint {}",
            log.len(),
            last.mse_loss,
            final_path.display()
        );
    } else {
        println!("done: 0 steps, checkpoint {}", final_path.display());
    }
    Ok(())
}

pub fn predict(args: PredictArgs) -> Result<(), Failure> {
    let file = load_file_config(&args.config)?;
    let checkpoint = merge_opt(args.checkpoint, &file, "checkpoint")?
        .ok_or_else(|| Failure::bad_input("field `checkpoint`: required"))?;
    let out = merge_opt(args.out, &file, "out")?
        .ok_or_else(|| Failure::bad_input("field `out`: output directory is required"))?;
    let overlap = merge(args.overlap, &file, "overlap", DEFAULT_OVERLAP)?;
    let threshold = merge(args.threshold, &file, "threshold", 0.5f32)?;
    let threads = merge(args.threads, &file, "threads", 1usize)?.max(1);
    ensure_out_dir(&out)?;

    let params = ParamStore::load(&checkpoint).map_err(|e| Failure::bad_input(e.to_string()))?;
    let graph = ModelGraph::new(params.meta.width_scale);
    graph
        .validate_store(&params)
        .map_err(|e| Failure::bad_input(e.to_string()))?;

    for input in &args.inputs {
        let image = load_rgb_image(input).map_err(|e| Failure::bad_input(e.to_string()))?;
        let (h, w) = (image.height(), image.width());
        let grid = plan_tiles(h, w, resunet_core::data::TILE_SIZE, overlap)
            .map_err(|e| Failure::bad_input(format!("{}: {e}", input.display())))?;
        println!(
            "{}: {}x{}, tiles={} ({} x {}), overlap={}",
            input.display(),
            w,
            h,
            grid.len(),
            grid.xs.len(),
            grid.ys.len(),
            overlap
        );
        let map =
            predict_image_threaded(&image, &graph, &params, overlap, Some(threshold), threads)
                .map_err(|e| Failure::bad_input(format!("{}: {e}", input.display())))?;
        let stem = input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "output".to_string());
        let prob_path = out.join(format!("{stem}_prob.png"));
        let mask_path = out.join(format!("{stem}_mask.png"));
        save_prob_png(&map.probs, &prob_path).map_err(|e| Failure::bad_input(e.to_string()))?;
        save_mask_png(
            map.binary.as_ref().expect("threshold was applied"),
            &mask_path,
        )
        .map_err(|e| Failure::bad_input(e.to_string()))?;
        println!(
            "  wrote {} and {}",
            prob_path.display(),
            mask_path.display()
        );
    }
    Ok(())
}

fn parse_distance(s: &str) -> Result<DistanceMetric, Failure> {
    match s {
        "chebyshev" => Ok(DistanceMetric::Chebyshev),
        "euclidean" => Ok(DistanceMetric::Euclidean),
        other => Err(Failure::bad_input(format!(
            "field `distance`: expected chebyshev or euclidean, got `{other}`"
        ))),
    }
}

fn parse_thresholds(s: &str) -> Result<Vec<f64>, Failure> {
    let values: Result<Vec<f64>, _> = s.split(',').map(|v| v.trim().parse::<f64>()).collect();
    let values = values.map_err(|e| Failure::bad_input(format!("field `thresholds`: {e}")))?;
    if values.is_empty() || !values.windows(2).all(|w| w[0] < w[1]) {
        return Err(Failure::bad_input(
            "field `thresholds`: must be non-empty and strictly increasing",
        ));
    }
    if values.iter().any(|&t| !(0.0..=1.0).contains(&t)) {
        return Err(Failure::bad_input(
            "field `thresholds`: values must lie in [0, 1]",
        ));
    }
    Ok(values)
}

pub fn evaluate(args: EvaluateArgs) -> Result<(), Failure> {
    let file = load_file_config(&args.config)?;
    let manifest = merge_opt(args.manifest, &file, "manifest")?
        .ok_or_else(|| Failure::bad_input("field `manifest`: required"))?;
    let out = merge_opt(args.out, &file, "out")?
        .ok_or_else(|| Failure::bad_input("field `out`: output directory is required"))?;
    let rho = merge(args.rho, &file, "rho", 3usize)?;
    let distance = parse_distance(&merge(
        args.distance,
        &file,
        "distance",
        "chebyshev".to_string(),
    )?)?;
    let thresholds = match merge_opt(args.thresholds, &file, "thresholds")? {
        Some(list) => parse_thresholds(&list)?,
        None => default_thresholds(),
    };
    ensure_out_dir(&out)?;

    let pairs = resunet_core::data::load_manifest(&manifest)
        .map_err(|e| Failure::bad_input(e.to_string()))?;
    if pairs.is_empty() {
        return Err(Failure::bad_input("field `manifest`: no prediction pairs"));
    }
    let mut probs = Vec::new();
    let mut gts = Vec::new();
    let mut mismatches = Vec::new();
    for (pred_path, gt_path) in &pairs {
        let pred = load_gray_image(pred_path).map_err(|e| Failure::bad_input(e.to_string()))?;
        let gt = load_gray_image(gt_path).map_err(|e| Failure::bad_input(e.to_string()))?;
        if pred.shape() != gt.shape() {
            mismatches.push(format!(
                "{} is {}x{} but {} is {}x{}",
                pred_path.display(),
                pred.width(),
                pred.height(),
                gt_path.display(),
                gt.width(),
                gt.height()
            ));
            continue;
        }
        probs.push(pred);
        gts.push(BinaryMask::from_probs(&gt, 128.0 / 255.0));
    }
    if !mismatches.is_empty() {
        return Err(Failure::bad_input(format!(
            "shape mismatches:\n  {}",
            mismatches.join("\n  ")
        )));
    }

    let curve = pr_curve(&probs, &gts, rho, distance, &thresholds)
        .map_err(|e| Failure::bad_input(e.to_string()))?;

    let csv_path = out.join("pr_curve.csv");
    let f = fs::File::create(&csv_path)
        .map_err(|e| Failure::bad_input(format!("{}: {e}", csv_path.display())))?;
    write_pr_csv(&curve, f)
        .map_err(|e| Failure::bad_input(format!("{}: {e}", csv_path.display())))?;

    let summary = summary_line(&curve);
    let summary_path = out.join("summary.txt");
    fs::write(&summary_path, format!("{summary}\n"))
        .map_err(|e| Failure::bad_input(format!("{}: {e}", summary_path.display())))?;
    println!("{summary}");
    println!(
        "wrote {} and {}",
        csv_path.display(),
        summary_path.display()
    );
    Ok(())
}

pub fn verify(args: VerifyArgs) -> Result<(), Failure> {
    let seed = args.seed.unwrap_or(0);
    let fault = args.inject_fault.then_some(Fault::CorruptConvBackward);
    let reports = run_all(seed, fault);
    let mut all_passed = true;
    for report in &reports {
        let tag = if report.passed { "PASS" } else { "FAIL" };
        println!("[{tag}] {}: {}", report.name, report.detail);
        all_passed &= report.passed;
    }
    if all_passed {
        println!("all {} checks passed", reports.len());
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            message: format!(
                "{} of {} checks failed",
                reports.iter().filter(|r| !r.passed).count(),
                reports.len()
            ),
        })
    }
}
