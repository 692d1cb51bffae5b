//! Command-line front end: dataset synthesis, direct pair alignment,
//! self-supervised training, inference, test-set evaluation, and
//! texture/label transfer.
//!
//! Every subcommand writes a `config.json` echo of its fully resolved
//! settings next to its outputs; reruns with the same config and seed
//! reproduce metric files byte for byte. Exit codes: 0 success, 2 invalid
//! inputs, 3 numeric failure (a machine-readable JSON line goes to stderr).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use shapewarp::error::Error;
use shapewarp::evaluator::{
    eval_testset, infer, ransac_affine, write_eval_csv, write_strip, Checkpoint, MaskProtocol,
    RansacConfig,
};
use shapewarp::grids::{load_silhouette, save_silhouette, Silhouette};
use shapewarp::pair_optimizer::{
    align_pair, align_pair_with_rotation, apply_alignment, write_loss_trace, OptimizeConfig,
};
use shapewarp::parametrization::{ControlWarp, DifferentialWarp, RegularizationMode};
use shapewarp::sampler::{
    compose, resample, resample_nearest, rotation_warp, save_dense_warp, upsample,
};
use shapewarp::synth::{generate_dataset, ShapeKind};
use shapewarp::trainer::{load_manifest, split_dataset, train, write_manifest, TrainConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(
    name = "shapewarp",
    about = "Silhouette alignment via grid-based free-form deformation",
    version
)]
struct Cli {
    /// Cap the worker thread pool (default: all cores).
    #[arg(long, global = true, env = "SHAPEWARP_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural silhouette dataset.
    Synth(SynthArgs),
    /// Directly optimize a warp aligning one source to one target.
    Align(AlignArgs),
    /// Train the warp regressor self-supervised on a shape directory.
    Train(TrainArgs),
    /// Run a trained regressor on one (source, target) pair.
    Infer(InferArgs),
    /// Evaluate a checkpoint over every ordered test pair.
    Eval(EvalArgs),
    /// Apply a saved warp to an RGB texture or a label image.
    Transfer(TransferArgs),
    /// Align with the RANSAC affine baseline instead of an FFD.
    Ransac(RansacArgs),
}

#[derive(Args, Serialize)]
struct SynthArgs {
    /// Shape family: ellipse, rounded-rect, cross.
    #[arg(long, default_value = "ellipse")]
    kind: String,
    #[arg(long, default_value_t = 120)]
    count: usize,
    #[arg(long, default_value_t = 64, env = "SHAPEWARP_RESOLUTION")]
    resolution: usize,
    #[arg(long, default_value_t = 0, env = "SHAPEWARP_SEED")]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct AlignArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Jointly optimize a global rotation angle.
    #[arg(long, default_value_t = false)]
    rotation: bool,
    /// Regularization mode: none, tv, tvm.
    #[arg(long, default_value = "tvm", env = "SHAPEWARP_MODE")]
    mode: String,
    #[arg(long, default_value_t = 1e-5, env = "SHAPEWARP_LAMBDA")]
    lambda: f64,
    #[arg(long, default_value_t = 0.05, env = "SHAPEWARP_LR")]
    lr: f64,
    #[arg(long, default_value_t = 1000)]
    max_iters: usize,
    #[arg(long, default_value_t = 8, env = "SHAPEWARP_GRID_M")]
    grid_m: usize,
    #[arg(long, default_value_t = 8, env = "SHAPEWARP_GRID_N")]
    grid_n: usize,
    #[arg(long, default_value_t = 0, env = "SHAPEWARP_SEED")]
    seed: u64,
    /// Also export the dense per-pixel warp as a binary blob.
    #[arg(long, default_value_t = false)]
    export_dense: bool,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// Directory of silhouette PNGs to split and train on.
    #[arg(long, conflicts_with = "manifest")]
    data: Option<PathBuf>,
    /// Existing split manifest (from a previous run).
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 10)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3, env = "SHAPEWARP_LR")]
    lr: f64,
    #[arg(long, default_value_t = 1e-5, env = "SHAPEWARP_LAMBDA")]
    lambda: f64,
    #[arg(long, default_value = "tvm", env = "SHAPEWARP_MODE")]
    mode: String,
    /// Mask side-length fractions, e.g. 0.2..0.6 (0..0 disables masking).
    #[arg(long, default_value = "0.2..0.6", env = "SHAPEWARP_MASK_RANGE")]
    mask_range: String,
    /// Per-axis target scale augmentation, e.g. 0.9..1.1.
    #[arg(long, default_value = "0.9..1.1")]
    scale_range: String,
    /// Target rotation augmentation in degrees, e.g. -15..15 (empty: 0..0).
    #[arg(long, default_value = "0..0")]
    rotation_aug: String,
    #[arg(long, default_value_t = 0, env = "SHAPEWARP_SEED")]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    #[arg(long, default_value_t = 64, env = "SHAPEWARP_RESOLUTION")]
    resolution: usize,
    #[arg(long, default_value_t = 8, env = "SHAPEWARP_GRID_M")]
    grid_m: usize,
    #[arg(long, default_value_t = 8, env = "SHAPEWARP_GRID_N")]
    grid_n: usize,
    /// Continue from an existing checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = false)]
    export_dense: bool,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Occlusion protocol: none or random.
    #[arg(long, default_value = "random")]
    mask_protocol: String,
    #[arg(long, default_value = "0.2..0.6", env = "SHAPEWARP_MASK_RANGE")]
    mask_range: String,
    #[arg(long, default_value_t = 0, env = "SHAPEWARP_SEED")]
    seed: u64,
    /// Write side-by-side strips for the first N pairs.
    #[arg(long, default_value_t = 0)]
    strips: usize,
}

#[derive(Args, Serialize)]
struct TransferArgs {
    /// Warp JSON produced by align or infer (or a bare control grid).
    #[arg(long)]
    warp: PathBuf,
    /// RGB texture or label image to warp.
    #[arg(long)]
    input: PathBuf,
    /// Output image path.
    #[arg(long)]
    out: PathBuf,
    /// Treat the input as categorical labels (nearest-neighbor lookup).
    #[arg(long, default_value_t = false)]
    labels: bool,
}

#[derive(Args, Serialize)]
struct RansacArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    trials: usize,
    #[arg(long, default_value_t = 0, env = "SHAPEWARP_SEED")]
    seed: u64,
}

/// Saved warp: the integrated control grid plus the raw differential and any
/// recovered rotation, so it can be re-applied or inspected later.
#[derive(Serialize, serde::Deserialize)]
struct WarpFile {
    control: ControlWarp,
    delta: DifferentialWarp,
    mode: String,
    #[serde(default)]
    theta: f64,
}

fn parse_range(s: &str) -> Result<(f64, f64), Error> {
    let parts: Vec<&str> = s.split("..").collect();
    if parts.len() != 2 {
        return Err(Error::validation(format!("range '{s}' must look like LO..HI")));
    }
    let lo: f64 = parts[0]
        .parse()
        .map_err(|_| Error::validation(format!("bad range bound '{}'", parts[0])))?;
    let hi: f64 = parts[1]
        .parse()
        .map_err(|_| Error::validation(format!("bad range bound '{}'", parts[1])))?;
    Ok((lo, hi))
}

fn write_config_echo(dir: &Path, name: &str, value: serde_json::Value) -> Result<(), Error> {
    std::fs::create_dir_all(dir)?;
    let payload = serde_json::to_string_pretty(&value)?;
    std::fs::write(dir.join(name), payload)?;
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<(), Error> {
    let kind = ShapeKind::parse(&args.kind)?;
    write_config_echo(&args.out, "config.json", serde_json::to_value(args)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let paths = generate_dataset(kind, args.count, args.resolution, &mut rng, &args.out)?;
    eprintln!("wrote {} shapes to {}", paths.len(), args.out.display());
    Ok(())
}

fn cmd_align(args: &AlignArgs) -> Result<(), Error> {
    let mode = RegularizationMode::parse(&args.mode)?;
    let source = load_silhouette(&args.source, 0.5)?;
    let target = load_silhouette(&args.target, 0.5)?;
    write_config_echo(&args.out, "config.json", serde_json::to_value(args)?)?;

    let config = OptimizeConfig {
        max_iters: args.max_iters,
        learning_rate: args.lr,
        lambda: args.lambda,
        mode,
        seed: args.seed,
        ..OptimizeConfig::default()
    };
    let result = if args.rotation {
        align_pair_with_rotation(&source, &target, &config, args.grid_m, args.grid_n)?
    } else {
        align_pair(&source, &target, &config, args.grid_m, args.grid_n)?
    };

    let warped = apply_alignment(&result, &source)?;
    save_silhouette(&warped, args.out.join("warped.png"))?;
    write_loss_trace(&result.loss_trace, args.out.join("trace.csv"))?;
    let warp_file = WarpFile {
        control: result.control.clone(),
        delta: result.delta.clone(),
        mode: mode.as_str().to_string(),
        theta: result.theta,
    };
    std::fs::write(
        args.out.join("warp.json"),
        serde_json::to_string_pretty(&warp_file)?,
    )?;
    if args.export_dense {
        let dense = upsample(&result.control, source.height(), source.width())?;
        save_dense_warp(&dense, args.out.join("dense_warp.bin"))?;
    }
    eprintln!(
        "aligned in {} iters (converged: {}), final loss {}",
        result.iters_run,
        result.converged,
        result.loss_trace.last().map(|r| r.total).unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<(), Error> {
    let mode = RegularizationMode::parse(&args.mode)?;
    let config = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.lr,
        lambda: args.lambda,
        mode,
        mask_range: parse_range(&args.mask_range)?,
        scale_range: parse_range(&args.scale_range)?,
        rotation_range_deg: parse_range(&args.rotation_aug)?,
        augment_source: false,
        seed: args.seed,
        checkpoint_every: args.checkpoint_every,
        resolution: args.resolution,
        m: args.grid_m,
        n: args.grid_n,
    };
    let dataset = match (&args.data, &args.manifest) {
        (Some(dir), None) => split_dataset(dir, args.seed, args.resolution)?,
        (None, Some(path)) => load_manifest(path)?,
        _ => {
            return Err(Error::validation(
                "pass exactly one of --data or --manifest",
            ))
        }
    };
    std::fs::create_dir_all(&args.out)?;
    write_manifest(&dataset, args.out.join("manifest.json"))?;
    write_config_echo(
        &args.out,
        "config.json",
        serde_json::json!({
            "args": serde_json::to_value(args)?,
            "resolved": serde_json::to_value(&config)?,
        }),
    )?;
    let outcome = train(&dataset, &config, &args.out, args.resume.as_deref())?;
    eprintln!(
        "trained {} steps; final held-out IOU {} (identity baseline {})",
        outcome.steps_run, outcome.final_heldout_iou, outcome.identity_iou
    );
    Ok(())
}

fn cmd_infer(args: &InferArgs) -> Result<(), Error> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let source = load_silhouette(&args.source, 0.5)?;
    let target = load_silhouette(&args.target, 0.5)?;
    write_config_echo(&args.out, "config.json", serde_json::to_value(args)?)?;
    let inference = infer(&ckpt, &source, &target)?;
    save_silhouette(&inference.warped, args.out.join("warped.png"))?;
    let warp_file = WarpFile {
        control: inference.control.clone(),
        delta: inference.raw_delta.clone(),
        mode: ckpt.mode.as_str().to_string(),
        theta: 0.0,
    };
    std::fs::write(
        args.out.join("warp.json"),
        serde_json::to_string_pretty(&warp_file)?,
    )?;
    if args.export_dense {
        let dense = upsample(&inference.control, source.height(), source.width())?;
        save_dense_warp(&dense, args.out.join("dense_warp.bin"))?;
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), Error> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let dataset = load_manifest(&args.manifest)?;
    let protocol = match args.mask_protocol.as_str() {
        "none" => MaskProtocol::None,
        "random" => MaskProtocol::Random {
            size_range: parse_range(&args.mask_range)?,
        },
        other => {
            return Err(Error::validation(format!(
                "unknown mask protocol '{other}' (expected none, random)"
            )))
        }
    };
    write_config_echo(&args.out, "config.json", serde_json::to_value(args)?)?;
    let report = eval_testset(&ckpt, &dataset, protocol, args.seed)?;
    write_eval_csv(&report, args.out.join("eval.csv"))?;
    let summary = serde_json::json!({
        "records": report.records.len(),
        "mean_iou_partial": report.mean_iou_partial,
        "mean_iou_full": report.mean_iou_full,
        "mean_smoothness": report.mean_smoothness,
        "mean_consistency": report.mean_consistency,
    });
    std::fs::write(
        args.out.join("eval_summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;

    if args.strips > 0 {
        let strips_dir = args.out.join("strips");
        std::fs::create_dir_all(&strips_dir)?;
        let items = shapewarp::trainer::load_items(&dataset.test_items, ckpt.resolution())?;
        let mut written = 0usize;
        'outer: for s in 0..items.len() {
            for t in 0..items.len() {
                if s == t {
                    continue;
                }
                if written >= args.strips {
                    break 'outer;
                }
                let record = &report.records[written];
                let partial = match &record.mask {
                    Some(m) => shapewarp::grids::apply_mask(&items[t], m),
                    None => items[t].clone(),
                };
                let inf = infer(&ckpt, &items[s], &partial)?;
                write_strip(
                    &[&items[s], &partial, &inf.warped, &items[t]],
                    strips_dir.join(format!("pair_{written:04}.png")),
                )?;
                written += 1;
            }
        }
    }
    eprintln!(
        "evaluated {} pairs: mean IOU {:.4} (partial input), {:.4} (full input)",
        report.records.len(),
        report.mean_iou_partial,
        report.mean_iou_full
    );
    Ok(())
}

/// Per-channel bilinear warp of an arbitrary 8-bit image; label images use a
/// single nearest-neighbor lookup instead so ids never blend.
fn cmd_transfer(args: &TransferArgs) -> Result<(), Error> {
    let text = std::fs::read_to_string(&args.warp)?;
    let warp_file: WarpFile = match serde_json::from_str(&text) {
        Ok(w) => w,
        Err(_) => {
            let control: ControlWarp = serde_json::from_str(&text)?;
            WarpFile {
                delta: DifferentialWarp::zeros(control.m, control.n),
                control,
                mode: "tvm".into(),
                theta: 0.0,
            }
        }
    };
    let img = image::open(&args.input)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if h < 2 || w < 2 {
        return Err(Error::validation("input image must be at least 2x2"));
    }
    let mut dense = upsample(&warp_file.control, h, w)?;
    if warp_file.theta != 0.0 {
        dense = compose(&dense, &rotation_warp(warp_file.theta, h, w)?)?;
    }

    let mut channels = Vec::with_capacity(3);
    for ch in 0..3 {
        let values: Vec<f64> = img.pixels().map(|p| p.0[ch] as f64 / 255.0).collect();
        let plane = Silhouette::new(h, w, values)?;
        let warped = if args.labels {
            resample_nearest(&plane, &dense)?
        } else {
            resample(&plane, &dense)?
        };
        channels.push(warped);
    }
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let px = [
                (channels[0].get(r, c) * 255.0).round().clamp(0.0, 255.0) as u8,
                (channels[1].get(r, c) * 255.0).round().clamp(0.0, 255.0) as u8,
                (channels[2].get(r, c) * 255.0).round().clamp(0.0, 255.0) as u8,
            ];
            out.put_pixel(c as u32, r as u32, image::Rgb(px));
        }
    }
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    out.save(&args.out)?;
    let echo_path = args.out.with_extension("config.json");
    std::fs::write(
        echo_path,
        serde_json::to_string_pretty(&serde_json::to_value(args)?)?,
    )?;
    Ok(())
}

fn cmd_ransac(args: &RansacArgs) -> Result<(), Error> {
    let source = load_silhouette(&args.source, 0.5)?;
    let target = load_silhouette(&args.target, 0.5)?;
    write_config_echo(&args.out, "config.json", serde_json::to_value(args)?)?;
    let config = RansacConfig {
        trials: args.trials,
        seed: args.seed,
    };
    let (params, warped, score) = ransac_affine(&source, &target, &config)?;
    save_silhouette(&warped, args.out.join("warped.png"))?;
    std::fs::write(
        args.out.join("affine.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "params": params,
            "iou": score,
        }))?,
    )?;
    eprintln!("best affine IOU {score:.4}");
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Align(args) => cmd_align(args),
        Command::Train(args) => cmd_train(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Transfer(args) => cmd_transfer(args),
        Command::Ransac(args) => cmd_ransac(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        // Ignore the error if a pool already exists (e.g. repeated init in tests).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let payload = serde_json::json!({
                "error": err.kind(),
                "message": err.to_string(),
                "exit_code": err.exit_code(),
            });
            eprintln!("{payload}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
