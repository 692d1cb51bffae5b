//! Black-box tests of the command-line interface contracts: emitted files,
//! exit codes, error JSON, and byte-level reproducibility.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_shapewarp"))
}

fn synth(dir: &Path, count: usize, resolution: usize, seed: u64) {
    let status = bin()
        .args([
            "synth",
            "--kind",
            "ellipse",
            "--count",
            &count.to_string(),
            "--resolution",
            &resolution.to_string(),
            "--seed",
            &seed.to_string(),
            "--out",
        ])
        .arg(dir)
        .status()
        .unwrap();
    assert!(status.success());
}

#[test]
fn align_writes_contracted_files() {
    let dir = tempfile::tempdir().unwrap();
    let shapes = dir.path().join("shapes");
    synth(&shapes, 2, 64, 1);
    let out = dir.path().join("out");
    let status = bin()
        .arg("align")
        .arg("--source")
        .arg(shapes.join("shape_0000.png"))
        .arg("--target")
        .arg(shapes.join("shape_0001.png"))
        .arg("--out")
        .arg(&out)
        .args(["--max-iters", "60"])
        .status()
        .unwrap();
    assert!(status.success());
    for f in ["warp.json", "warped.png", "trace.csv", "config.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
}

#[test]
fn align_mode_none_zeroes_reg_column() {
    let dir = tempfile::tempdir().unwrap();
    let shapes = dir.path().join("shapes");
    synth(&shapes, 2, 64, 2);
    let out = dir.path().join("out");
    let status = bin()
        .arg("align")
        .arg("--source")
        .arg(shapes.join("shape_0000.png"))
        .arg("--target")
        .arg(shapes.join("shape_0001.png"))
        .arg("--out")
        .arg(&out)
        .args(["--max-iters", "40", "--mode", "none", "--lambda", "0"])
        .status()
        .unwrap();
    assert!(status.success());
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    for line in trace.lines().skip(1) {
        let reg: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(reg, 0.0);
    }
}

#[test]
fn align_mismatched_sizes_exits_2_with_error_json() {
    let dir = tempfile::tempdir().unwrap();
    let small = dir.path().join("small");
    let big = dir.path().join("big");
    synth(&small, 1, 32, 3);
    synth(&big, 1, 64, 3);
    let output = bin()
        .arg("align")
        .arg("--source")
        .arg(small.join("shape_0000.png"))
        .arg("--target")
        .arg(big.join("shape_0000.png"))
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    let json_line = stderr.lines().last().unwrap();
    let err: serde_json::Value = serde_json::from_str(json_line).unwrap();
    assert_eq!(err["error"], "validation");
    assert_eq!(err["exit_code"], 2);
}

#[test]
fn train_smoke_and_deterministic_metrics() {
    // A tiny end-to-end run at reduced resolution; rerunning with the same
    // seed reproduces the metrics CSV byte for byte.
    let dir = tempfile::tempdir().unwrap();
    let shapes = dir.path().join("shapes");
    synth(&shapes, 20, 32, 4);
    let run = |out: &Path| {
        let status = bin()
            .arg("train")
            .arg("--data")
            .arg(&shapes)
            .arg("--out")
            .arg(out)
            .args([
                "--epochs",
                "2",
                "--batch-size",
                "2",
                "--resolution",
                "32",
                "--seed",
                "5",
            ])
            .status()
            .unwrap();
        assert!(status.success());
    };
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    run(&out_a);
    run(&out_b);
    assert!(out_a.join("model_final.ckpt").exists());
    assert!(out_a.join("manifest.json").exists());
    let a = std::fs::read(out_a.join("metrics.csv")).unwrap();
    let b = std::fs::read(out_b.join("metrics.csv")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn resume_continues_step_numbering() {
    let dir = tempfile::tempdir().unwrap();
    let shapes = dir.path().join("shapes");
    synth(&shapes, 8, 32, 6);
    let out_a = dir.path().join("a");
    let status = bin()
        .arg("train")
        .arg("--data")
        .arg(&shapes)
        .arg("--out")
        .arg(&out_a)
        .args(["--epochs", "1", "--batch-size", "2", "--resolution", "32", "--seed", "6"])
        .status()
        .unwrap();
    assert!(status.success());
    let out_b = dir.path().join("b");
    let status = bin()
        .arg("train")
        .arg("--manifest")
        .arg(out_a.join("manifest.json"))
        .arg("--out")
        .arg(&out_b)
        .args(["--epochs", "1", "--batch-size", "2", "--resolution", "32", "--seed", "6"])
        .arg("--resume")
        .arg(out_a.join("model_final.ckpt"))
        .status()
        .unwrap();
    assert!(status.success());
    let first_metrics = std::fs::read_to_string(out_a.join("metrics.csv")).unwrap();
    let last_step_a: usize = first_metrics
        .lines()
        .last()
        .unwrap()
        .split(',')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    let metrics = std::fs::read_to_string(out_b.join("metrics.csv")).unwrap();
    let first_step_b: usize = metrics
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(first_step_b, last_step_a + 1);
}

#[test]
fn infer_untrained_checkpoint_reproduces_source() {
    let dir = tempfile::tempdir().unwrap();
    let shapes = dir.path().join("shapes");
    synth(&shapes, 6, 32, 7);
    let train_out = dir.path().join("train");
    // Zero-epoch training is rejected, so train for one step-equivalent by
    // writing a fresh checkpoint through a 1-epoch run with lr 0.
    let status = bin()
        .arg("train")
        .arg("--data")
        .arg(&shapes)
        .arg("--out")
        .arg(&train_out)
        .args([
            "--epochs", "1", "--batch-size", "1", "--resolution", "32", "--seed", "7", "--lr", "0",
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let infer_out = dir.path().join("infer");
    let status = bin()
        .arg("infer")
        .arg("--checkpoint")
        .arg(train_out.join("model_final.ckpt"))
        .arg("--source")
        .arg(shapes.join("shape_0000.png"))
        .arg("--target")
        .arg(shapes.join("shape_0001.png"))
        .arg("--out")
        .arg(&infer_out)
        .status()
        .unwrap();
    assert!(status.success());
    let source = shapewarp::grids::load_silhouette(shapes.join("shape_0000.png"), 0.5).unwrap();
    let warped = shapewarp::grids::load_silhouette(infer_out.join("warped.png"), 0.5).unwrap();
    assert_eq!(source, warped);
}

#[test]
fn transfer_identity_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    // Identity warp JSON straight from the parametrization.
    let control = shapewarp::parametrization::integrate(
        &shapewarp::parametrization::identity_differential(8, 8).unwrap(),
    );
    let warp_path = dir.path().join("warp.json");
    std::fs::write(&warp_path, serde_json::to_string(&control).unwrap()).unwrap();

    // A small RGB texture.
    let mut img = image::RgbImage::new(32, 32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        *p = image::Rgb([(x * 8) as u8, (y * 8) as u8, ((x + y) * 4) as u8]);
    }
    let input = dir.path().join("texture.png");
    img.save(&input).unwrap();

    // Nearest-neighbor path: bit-exact.
    let out_labels = dir.path().join("labels.png");
    let status = bin()
        .arg("transfer")
        .arg("--warp")
        .arg(&warp_path)
        .arg("--input")
        .arg(&input)
        .arg("--out")
        .arg(&out_labels)
        .arg("--labels")
        .status()
        .unwrap();
    assert!(status.success());
    let back = image::open(&out_labels).unwrap().to_rgb8();
    assert_eq!(back.as_raw(), img.as_raw());

    // Bilinear path: within one 8-bit step.
    let out_tex = dir.path().join("tex.png");
    let status = bin()
        .arg("transfer")
        .arg("--warp")
        .arg(&warp_path)
        .arg("--input")
        .arg(&input)
        .arg("--out")
        .arg(&out_tex)
        .status()
        .unwrap();
    assert!(status.success());
    let back = image::open(&out_tex).unwrap().to_rgb8();
    for (a, b) in back.as_raw().iter().zip(img.as_raw()) {
        assert!((*a as i16 - *b as i16).abs() <= 1);
    }
    assert!(dir.path().join("tex.config.json").exists());
}

#[test]
fn eval_small_manifest_row_count() {
    let dir = tempfile::tempdir().unwrap();
    let shapes = dir.path().join("shapes");
    synth(&shapes, 15, 32, 8);
    let train_out = dir.path().join("train");
    let status = bin()
        .arg("train")
        .arg("--data")
        .arg(&shapes)
        .arg("--out")
        .arg(&train_out)
        .args(["--epochs", "1", "--batch-size", "2", "--resolution", "32", "--seed", "8"])
        .status()
        .unwrap();
    assert!(status.success());
    let eval_out = dir.path().join("eval");
    let status = bin()
        .arg("eval")
        .arg("--checkpoint")
        .arg(train_out.join("model_final.ckpt"))
        .arg("--manifest")
        .arg(train_out.join("manifest.json"))
        .arg("--out")
        .arg(&eval_out)
        .args(["--seed", "8", "--strips", "2"])
        .status()
        .unwrap();
    assert!(status.success());
    // 15 images -> 3 test items -> 6 ordered pairs.
    let csv = std::fs::read_to_string(eval_out.join("eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6);
    assert!(eval_out.join("eval_summary.json").exists());
    assert!(eval_out.join("strips").join("pair_0000.png").exists());

    // Reruns are byte-identical.
    let eval_out2 = dir.path().join("eval2");
    bin()
        .arg("eval")
        .arg("--checkpoint")
        .arg(train_out.join("model_final.ckpt"))
        .arg("--manifest")
        .arg(train_out.join("manifest.json"))
        .arg("--out")
        .arg(&eval_out2)
        .args(["--seed", "8"])
        .status()
        .unwrap();
    assert_eq!(
        std::fs::read(eval_out.join("eval.csv")).unwrap(),
        std::fs::read(eval_out2.join("eval.csv")).unwrap()
    );
}
