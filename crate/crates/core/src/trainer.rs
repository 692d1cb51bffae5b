//! Self-supervised training loop: draw shape pairs from the training pool,
//! occlude the target, regress a warp from the (source, partial target)
//! stack, and score the warped source against the complete target.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::{apply_mask, iou, load_silhouette, random_mask, RectMask, Silhouette};
use crate::losses::{combined_loss, tv_identity_loss, LossReport};
use crate::parametrization::{
    build_control_warp, build_control_warp_adjoint, effective_differential, RegularizationMode,
};
use crate::regressor::{
    adam_step, backward, forward, init_params, load_checkpoint, save_checkpoint, AdamState,
    RegressorParams,
};
use crate::sampler::{resample, resample_backward, upsample, upsample_backward, DenseWarp};

/// Training settings; defaults follow the reference hyperparameters
/// (8×8 grid, lambda 1e-5, ADAM at 1e-3).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub mode: RegularizationMode,
    /// Mask side lengths as fractions of the image dimensions; (0,0) disables
    /// masking.
    pub mask_range: (f64, f64),
    /// Per-axis scale augmentation interval applied to targets.
    pub scale_range: (f64, f64),
    /// Rotation augmentation interval in degrees; empty (0,0) by default.
    pub rotation_range_deg: (f64, f64),
    /// Also augment the source image (off by default; targets only).
    pub augment_source: bool,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many steps (0 = final only).
    pub checkpoint_every: usize,
    pub resolution: usize,
    pub m: usize,
    pub n: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 10,
            learning_rate: 1e-3,
            lambda: 1e-5,
            mode: RegularizationMode::TvMonotonic,
            mask_range: (0.2, 0.6),
            scale_range: (0.9, 1.1),
            rotation_range_deg: (0.0, 0.0),
            augment_source: false,
            seed: 0,
            checkpoint_every: 0,
            resolution: 64,
            m: 8,
            n: 8,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::validation("epochs and batch_size must be positive"));
        }
        for (name, (lo, hi)) in [
            ("mask_range", self.mask_range),
            ("scale_range", self.scale_range),
            ("rotation_range_deg", self.rotation_range_deg),
        ] {
            if lo > hi {
                return Err(Error::validation(format!("{name} is not well ordered")));
            }
        }
        Ok(())
    }
}

/// File-level train/test split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub train_items: Vec<PathBuf>,
    pub test_items: Vec<PathBuf>,
    pub resolution: usize,
    pub seed: u64,
    /// Present when the pool was too small for the standard 30-item test set.
    pub warning: Option<String>,
}

impl Dataset {
    /// Build directly from item lists (used by protocols that fix their own
    /// split). The lists must be disjoint; the test set may be empty.
    pub fn from_lists(
        train_items: Vec<PathBuf>,
        test_items: Vec<PathBuf>,
        resolution: usize,
    ) -> Result<Self> {
        for t in &test_items {
            if train_items.contains(t) {
                return Err(Error::validation(format!(
                    "item {} appears in both splits",
                    t.display()
                )));
            }
        }
        if train_items.is_empty() {
            return Err(Error::validation("train set is empty"));
        }
        Ok(Self {
            train_items,
            test_items,
            resolution,
            seed: 0,
            warning: None,
        })
    }
}

const STANDARD_TEST_SIZE: usize = 30;

/// Deterministic shuffled split of all PNG images in a directory: 30 items
/// are reserved for testing when the pool holds at least 60, otherwise a
/// fifth of the pool (at least one), recorded with a warning.
pub fn split_dataset(directory: impl AsRef<Path>, seed: u64, resolution: usize) -> Result<Dataset> {
    let dir = directory.as_ref();
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .map(|e| e.eq_ignore_ascii_case("png"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    if files.len() < 2 {
        return Err(Error::validation(format!(
            "directory {} holds {} decodable images, need at least 2",
            dir.display(),
            files.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates with the seeded stream.
    for i in (1..files.len()).rev() {
        let j = rng.gen_range(0..=i);
        files.swap(i, j);
    }
    let (test_size, warning) = if files.len() >= 2 * STANDARD_TEST_SIZE {
        (STANDARD_TEST_SIZE, None)
    } else {
        let fallback = (files.len() / 5).max(1);
        (
            fallback,
            Some(format!(
                "pool of {} is too small for the standard {}-item test set; reserved {}",
                files.len(),
                STANDARD_TEST_SIZE,
                fallback
            )),
        )
    };
    let test_items = files.split_off(files.len() - test_size);
    Ok(Dataset {
        train_items: files,
        test_items,
        resolution,
        seed,
        warning,
    })
}

/// Write the split as JSON next to other run outputs.
pub fn write_manifest(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path.as_ref(), serde_json::to_string_pretty(dataset)?)?;
    Ok(())
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let text = std::fs::read_to_string(path.as_ref())?;
    Ok(serde_json::from_str(&text)?)
}

/// Load and binarize every item, validating the resolution.
pub fn load_items(paths: &[PathBuf], resolution: usize) -> Result<Vec<Silhouette>> {
    paths
        .iter()
        .map(|p| {
            let s = load_silhouette(p, 0.5)?;
            if s.height() != resolution || s.width() != resolution {
                return Err(Error::validation(format!(
                    "{} is {}x{}, expected {resolution}x{resolution}",
                    p.display(),
                    s.height(),
                    s.width()
                )));
            }
            Ok(s)
        })
        .collect()
}

/// One training triplet: the full (augmented) target is kept for the loss,
/// the partial one is what the network sees.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub source_idx: usize,
    pub target_idx: usize,
    pub source: Silhouette,
    pub full_target: Silhouette,
    pub partial_target: Silhouette,
    pub mask: Option<RectMask>,
}

/// Dense warp of a scale-then-rotate map about the image center.
fn affine_warp(sx: f64, sy: f64, theta: f64, height: usize, width: usize) -> DenseWarp {
    let (s, c) = theta.sin_cos();
    let mut out = DenseWarp::zeros(height, width);
    for r in 0..height {
        let y = crate::grids::pixel_to_norm(r, height);
        for col in 0..width {
            let x = crate::grids::pixel_to_norm(col, width);
            let rx = c * x + s * y;
            let ry = -s * x + c * y;
            let o = r * width + col;
            out.x[o] = rx / sx;
            out.y[o] = ry / sy;
        }
    }
    out
}

fn augment(img: &Silhouette, sx: f64, sy: f64, theta: f64) -> Result<Silhouette> {
    if sx == 1.0 && sy == 1.0 && theta == 0.0 {
        return Ok(img.clone());
    }
    let warp = affine_warp(sx, sy, theta, img.height(), img.width());
    Ok(resample(img, &warp)?.binarize(0.5))
}

/// Draw one batch. Pairs are uniform with replacement over the training
/// items with source != target; targets are scale/rotation augmented and
/// then occluded. The per-sample draw order is fixed (indices, scales,
/// rotation, mask) so batches replay exactly from the seed.
pub fn sample_batch(
    items: &[Silhouette],
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<TrainSample>> {
    if items.is_empty() {
        return Err(Error::validation("empty training set"));
    }
    let mut batch = Vec::with_capacity(config.batch_size);
    for _ in 0..config.batch_size {
        let source_idx = rng.gen_range(0..items.len());
        let target_idx = if items.len() == 1 {
            source_idx
        } else {
            loop {
                let t = rng.gen_range(0..items.len());
                if t != source_idx {
                    break t;
                }
            }
        };
        let (slo, shi) = config.scale_range;
        let sx = if slo == shi { slo } else { rng.gen_range(slo..=shi) };
        let sy = if slo == shi { slo } else { rng.gen_range(slo..=shi) };
        let (rlo, rhi) = config.rotation_range_deg;
        let theta = if rlo == rhi {
            rlo.to_radians()
        } else {
            rng.gen_range(rlo..=rhi).to_radians()
        };

        let source = if config.augment_source {
            augment(&items[source_idx], sx, sy, theta)?
        } else {
            items[source_idx].clone()
        };
        let full_target = augment(&items[target_idx], sx, sy, theta)?;

        let masking_enabled = config.mask_range.1 > 0.0;
        let (partial_target, mask) = if masking_enabled && full_target.foreground_count(0.5) > 0 {
            let mask = random_mask(&full_target, config.mask_range, rng)?;
            (apply_mask(&full_target, &mask), Some(mask))
        } else {
            (full_target.clone(), None)
        };
        batch.push(TrainSample {
            source_idx,
            target_idx,
            source,
            full_target,
            partial_target,
            mask,
        });
    }
    Ok(batch)
}

/// Forward/backward of the full training objective for one sample. The loss
/// always compares against the complete target; the partial target only
/// enters as network input.
fn sample_pass(
    params: &RegressorParams,
    sample: &TrainSample,
    config: &TrainConfig,
) -> Result<(LossReport, RegressorParams)> {
    let (raw, cache) = forward(params, &sample.source, &sample.partial_target)?;
    let control = build_control_warp(&raw, config.mode);
    let dense = upsample(&control, config.resolution, config.resolution)?;
    let estimated = resample(&sample.source, &dense)?;
    let (report, grad_est, grad_reg) =
        combined_loss(&estimated, &sample.full_target, &raw, config.lambda, config.mode)?;
    let (grad_warp, _) = resample_backward(&sample.source, &dense, &grad_est)?;
    let wg = upsample_backward(&control, &grad_warp);
    let mut grad_raw = build_control_warp_adjoint(&raw, config.mode, &wg.d_control_x, &wg.d_control_y);
    for (g, r) in grad_raw.dx.iter_mut().zip(&grad_reg.dx) {
        *g += r;
    }
    for (g, r) in grad_raw.dy.iter_mut().zip(&grad_reg.dy) {
        *g += r;
    }
    Ok((report, backward(params, &cache, &grad_raw)))
}

/// Held-out metrics: mean IOU of the warped source against the complete
/// target (network sees the occluded target), the same under the identity
/// warp, and the mean smoothness (TV-identity value of the effective
/// increments).
pub struct HeldoutMetrics {
    pub mean_iou: f64,
    pub identity_iou: f64,
    pub mean_smoothness: f64,
    pub pairs: usize,
}

pub fn evaluate_heldout(
    params: &RegressorParams,
    test_items: &[Silhouette],
    config: &TrainConfig,
) -> Result<HeldoutMetrics> {
    let mut pairs = Vec::new();
    for s in 0..test_items.len() {
        for t in 0..test_items.len() {
            if s != t {
                pairs.push((s, t));
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::validation("test set has fewer than 2 items"));
    }
    let results: Vec<(f64, f64, f64)> = pairs
        .par_iter()
        .enumerate()
        .map(|(idx, (s, t))| -> Result<(f64, f64, f64)> {
            let source = &test_items[*s];
            let target = &test_items[*t];
            // Per-pair mask stream independent of epoch and evaluation order.
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (0x5EED_0000 + idx as u64));
            let partial = if config.mask_range.1 > 0.0 && target.foreground_count(0.5) > 0 {
                let mask = random_mask(target, config.mask_range, &mut rng)?;
                apply_mask(target, &mask)
            } else {
                target.clone()
            };
            let (raw, _) = forward(params, source, &partial)?;
            let control = build_control_warp(&raw, config.mode);
            let dense = upsample(&control, config.resolution, config.resolution)?;
            let warped = resample(source, &dense)?;
            let score = iou(&warped, target, 0.5)?;
            let baseline = iou(source, target, 0.5)?;
            let smooth = tv_identity_loss(&effective_differential(&raw, config.mode)).0;
            Ok((score, baseline, smooth))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = results.len() as f64;
    Ok(HeldoutMetrics {
        mean_iou: results.iter().map(|r| r.0).sum::<f64>() / n,
        identity_iou: results.iter().map(|r| r.1).sum::<f64>() / n,
        mean_smoothness: results.iter().map(|r| r.2).sum::<f64>() / n,
        pairs: results.len(),
    })
}

/// Per-epoch record of the held-out metrics.
#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub heldout_iou: f64,
    pub smoothness: f64,
}

/// Outcome of a training run.
pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub epochs: Vec<EpochRecord>,
    pub identity_iou: f64,
    pub final_heldout_iou: f64,
    pub final_smoothness: f64,
    pub steps_run: usize,
}

/// Run the training loop and write metrics, checkpoints and a summary under
/// `out_dir`. One epoch is N sampled batches where N is the train-set size;
/// gradients are summed over the batch in sample order. Resuming continues
/// the step counter and optimizer state from the checkpoint.
pub fn train(
    dataset: &Dataset,
    config: &TrainConfig,
    out_dir: impl AsRef<Path>,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let train_items = load_items(&dataset.train_items, config.resolution)?;
    let test_items = load_items(&dataset.test_items, config.resolution)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mut params, mut adam, start_step) = match resume {
        Some(path) => {
            let (params, adam, meta) = load_checkpoint(path)?;
            if params.resolution != config.resolution || params.m != config.m || params.n != config.n
            {
                return Err(Error::validation(
                    "checkpoint architecture does not match the configuration",
                ));
            }
            let adam = adam.unwrap_or_else(|| AdamState::new(&params));
            (params, adam, meta.step)
        }
        None => {
            let params = init_params(&mut rng, config.m, config.n, config.resolution)?;
            let adam = AdamState::new(&params);
            (params, adam, 0)
        }
    };

    let steps_per_epoch = train_items.len();
    let config_echo = serde_json::to_value(config)?;
    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = std::fs::File::create(&metrics_path)?;
    writeln!(metrics, "step,epoch,shape_loss,reg_loss,total,heldout_iou")?;

    let mut epoch_records = Vec::with_capacity(config.epochs);
    let mut identity_iou = f64::NAN;
    let mut step = start_step;
    for epoch in 0..config.epochs {
        for batch_idx in 0..steps_per_epoch {
            let batch = sample_batch(&train_items, config, &mut rng)?;
            let results: Vec<(LossReport, RegressorParams)> = batch
                .par_iter()
                .map(|sample| sample_pass(&params, sample, config))
                .collect::<Result<Vec<_>>>()?;

            let mut grads = params.zeros_like();
            let mut shape_sum = 0.0;
            let mut reg_sum = 0.0;
            for (report, g) in &results {
                grads.add_assign(g);
                shape_sum += report.shape_loss;
                reg_sum += report.reg_loss;
            }
            let nb = results.len() as f64;
            let report = LossReport::new(shape_sum / nb, reg_sum / nb, config.lambda);
            if !report.total.is_finite() {
                let diag = out_dir.join("model_diverged.ckpt");
                save_checkpoint(&diag, &params, Some(&adam), step, config.mode.as_str(), config_echo.clone())?;
                return Err(Error::numeric(step, "non-finite training loss"));
            }

            adam_step(&mut params, &grads, &mut adam, config.learning_rate);
            step += 1;

            let heldout = if batch_idx + 1 == steps_per_epoch && test_items.len() >= 2 {
                let metrics = evaluate_heldout(&params, &test_items, config)?;
                identity_iou = metrics.identity_iou;
                epoch_records.push(EpochRecord {
                    epoch,
                    heldout_iou: metrics.mean_iou,
                    smoothness: metrics.mean_smoothness,
                });
                format!("{}", metrics.mean_iou)
            } else {
                String::new()
            };
            writeln!(
                metrics,
                "{step},{epoch},{},{},{},{heldout}",
                report.shape_loss, report.reg_loss, report.total
            )?;

            if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
                let path = out_dir.join(format!("model_step_{step:06}.ckpt"));
                save_checkpoint(&path, &params, Some(&adam), step, config.mode.as_str(), config_echo.clone())?;
            }
        }
    }
    drop(metrics);

    let checkpoint_path = out_dir.join("model_final.ckpt");
    save_checkpoint(&checkpoint_path, &params, Some(&adam), step, config.mode.as_str(), config_echo.clone())?;

    let (final_heldout_iou, final_smoothness) = epoch_records
        .last()
        .map(|r| (r.heldout_iou, r.smoothness))
        .unwrap_or((f64::NAN, f64::NAN));
    let summary = serde_json::json!({
        "steps_run": step,
        "identity_iou": identity_iou,
        "final_heldout_iou": final_heldout_iou,
        "final_smoothness": final_smoothness,
        "epochs": epoch_records,
        "config": config_echo,
    });
    std::fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;

    Ok(TrainOutcome {
        checkpoint_path,
        metrics_path,
        epochs: epoch_records,
        identity_iou,
        final_heldout_iou,
        final_smoothness,
        steps_run: step,
    })
}
