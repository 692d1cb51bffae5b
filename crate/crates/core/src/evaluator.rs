//! Test-time inference and evaluation: frozen forward passes, full test-set
//! metrics over all ordered pairs, partial-agnosticism and occlusion stress
//! protocols, and a correspondence-free RANSAC affine baseline.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::{apply_mask, iou, random_mask, RectMask, Silhouette};
use crate::losses::tv_identity_loss;
use crate::parametrization::{
    build_control_warp, effective_differential, ControlWarp, DifferentialWarp, RegularizationMode,
};
use crate::regressor::{forward, load_checkpoint, CheckpointMeta, RegressorParams};
use crate::sampler::{resample, upsample};
use crate::trainer::{load_items, Dataset};

/// A loaded, frozen model. Inference never mutates it.
pub struct Checkpoint {
    pub params: RegressorParams,
    pub meta: CheckpointMeta,
    pub mode: RegularizationMode,
}

impl Checkpoint {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (params, _, meta) = load_checkpoint(path)?;
        let mode = RegularizationMode::parse(&meta.mode)?;
        Ok(Self { params, meta, mode })
    }

    pub fn resolution(&self) -> usize {
        self.params.resolution
    }
}

/// One frozen forward pass.
pub struct Inference {
    pub control: ControlWarp,
    pub warped: Silhouette,
    pub raw_delta: DifferentialWarp,
    /// TV-identity value of the effective (post-rectification) increments.
    pub smoothness: f64,
}

/// Regress a warp for the pair and apply it to the source.
pub fn infer(
    checkpoint: &Checkpoint,
    source: &Silhouette,
    partial_target: &Silhouette,
) -> Result<Inference> {
    let (raw, _) = forward(&checkpoint.params, source, partial_target)?;
    let control = build_control_warp(&raw, checkpoint.mode);
    let dense = upsample(&control, source.height(), source.width())?;
    let warped = resample(source, &dense)?;
    let smoothness = tv_identity_loss(&effective_differential(&raw, checkpoint.mode)).0;
    Ok(Inference {
        control,
        warped,
        raw_delta: raw,
        smoothness,
    })
}

/// How targets are occluded during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MaskProtocol {
    /// Evaluate on complete targets.
    None,
    /// One random rectangle per pair, reproducible from the seed.
    Random { size_range: (f64, f64) },
}

/// Metrics for one ordered test pair.
#[derive(Debug, Clone, Serialize)]
pub struct PairRecord {
    pub pair_id: usize,
    pub source: String,
    pub target: String,
    pub mask: Option<RectMask>,
    pub iou_partial_input: f64,
    pub iou_full_input: f64,
    pub smoothness: f64,
    pub warp_consistency: f64,
}

/// Whole-test-set evaluation: per-pair records plus aggregate means.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub records: Vec<PairRecord>,
    pub mean_iou_partial: f64,
    pub mean_iou_full: f64,
    pub mean_smoothness: f64,
    pub mean_consistency: f64,
}

/// Evaluate every ordered pair of test items (n items yield n·(n-1)
/// records). For each pair the warp is inferred twice, once from the
/// occluded target and once from the complete one; both warped outputs are
/// scored against the complete target, and the consistency column is the
/// max-abs control-grid difference between the two warps.
pub fn eval_testset(
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    protocol: MaskProtocol,
    seed: u64,
) -> Result<EvalReport> {
    if dataset.test_items.len() < 2 {
        return Err(Error::validation(format!(
            "test set needs at least 2 items for ordered pairs, got {}",
            dataset.test_items.len()
        )));
    }
    let items = load_items(&dataset.test_items, checkpoint.resolution())?;
    let names: Vec<String> = dataset
        .test_items
        .iter()
        .map(|p| {
            p.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string())
        })
        .collect();
    let mut pairs = Vec::new();
    for s in 0..items.len() {
        for t in 0..items.len() {
            if s != t {
                pairs.push((s, t));
            }
        }
    }
    let records: Vec<PairRecord> = pairs
        .par_iter()
        .enumerate()
        .map(|(pair_id, (s, t))| -> Result<PairRecord> {
            let source = &items[*s];
            let target = &items[*t];
            let (partial, mask) = match protocol {
                MaskProtocol::None => (target.clone(), None),
                MaskProtocol::Random { size_range } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0xEAA1_0000 + pair_id as u64));
                    let mask = random_mask(target, size_range, &mut rng)?;
                    (apply_mask(target, &mask), Some(mask))
                }
            };
            let partial_inf = infer(checkpoint, source, &partial)?;
            let full_inf = infer(checkpoint, source, target)?;
            Ok(PairRecord {
                pair_id,
                source: names[*s].clone(),
                target: names[*t].clone(),
                mask,
                iou_partial_input: iou(&partial_inf.warped, target, 0.5)?,
                iou_full_input: iou(&full_inf.warped, target, 0.5)?,
                smoothness: partial_inf.smoothness,
                warp_consistency: partial_inf.control.max_abs_diff(&full_inf.control),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let n = records.len() as f64;
    Ok(EvalReport {
        mean_iou_partial: records.iter().map(|r| r.iou_partial_input).sum::<f64>() / n,
        mean_iou_full: records.iter().map(|r| r.iou_full_input).sum::<f64>() / n,
        mean_smoothness: records.iter().map(|r| r.smoothness).sum::<f64>() / n,
        mean_consistency: records.iter().map(|r| r.warp_consistency).sum::<f64>() / n,
        records,
    })
}

/// Write the per-pair records as CSV.
pub fn write_eval_csv(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path.as_ref())?;
    writeln!(
        f,
        "pair_id,source,target,mask_center_row,mask_center_col,mask_height,mask_width,iou_partial_input,iou_full_input,smoothness,warp_consistency"
    )?;
    for r in &report.records {
        let mask_cols = match &r.mask {
            Some(m) => format!("{},{},{},{}", m.center_row, m.center_col, m.mask_height, m.mask_width),
            None => ",,,".to_string(),
        };
        writeln!(
            f,
            "{},{},{},{mask_cols},{},{},{},{}",
            r.pair_id, r.source, r.target, r.iou_partial_input, r.iou_full_input, r.smoothness, r.warp_consistency
        )?;
    }
    Ok(())
}

/// Consistency of the alignment across different occlusions of one target.
#[derive(Debug, Clone, Serialize)]
pub struct AgnosticismScore {
    /// Mean IOU over all pairs of warped outputs (masked variants plus the
    /// complete target).
    pub mean_pairwise_output_iou: f64,
    /// Mean over the same pairs of the max-abs control-warp difference.
    pub mean_max_warp_diff: f64,
    pub variants: usize,
}

/// Run inference once per masked variant plus once with the complete target
/// and measure how similar the resulting warps and outputs are.
pub fn partial_agnosticism_score(
    checkpoint: &Checkpoint,
    source: &Silhouette,
    full_target: &Silhouette,
    masks: &[RectMask],
) -> Result<AgnosticismScore> {
    if masks.len() < 2 {
        return Err(Error::validation("need at least 2 masks"));
    }
    let mut inferences = Vec::with_capacity(masks.len() + 1);
    for mask in masks {
        let partial = apply_mask(full_target, mask);
        inferences.push(infer(checkpoint, source, &partial)?);
    }
    inferences.push(infer(checkpoint, source, full_target)?);

    let mut iou_sum = 0.0;
    let mut diff_sum = 0.0;
    let mut count = 0usize;
    for i in 0..inferences.len() {
        for j in i + 1..inferences.len() {
            iou_sum += iou(&inferences[i].warped, &inferences[j].warped, 0.5)?;
            diff_sum += inferences[i].control.max_abs_diff(&inferences[j].control);
            count += 1;
        }
    }
    Ok(AgnosticismScore {
        mean_pairwise_output_iou: iou_sum / count as f64,
        mean_max_warp_diff: diff_sum / count as f64,
        variants: inferences.len(),
    })
}

/// One occlusion level of the stress protocol.
#[derive(Debug, Clone, Serialize)]
pub struct StressRecord {
    pub requested_fraction: f64,
    pub achieved_fraction: f64,
    pub iou: f64,
    pub mask: Option<RectMask>,
}

fn foreground_centroid(img: &Silhouette) -> Result<(usize, usize)> {
    let pixels = img.foreground_pixels(0.5);
    if pixels.is_empty() {
        return Err(Error::validation("no foreground for centroid"));
    }
    let (mut sr, mut sc) = (0.0, 0.0);
    for (r, c) in &pixels {
        sr += *r as f64;
        sc += *c as f64;
    }
    let n = pixels.len() as f64;
    Ok(((sr / n).round() as usize, (sc / n).round() as usize))
}

fn mask_for_scale(center: (usize, usize), scale: f64, height: usize, width: usize) -> RectMask {
    RectMask {
        center_row: center.0,
        center_col: center.1,
        mask_height: ((scale * height as f64).round() as usize).max(1),
        mask_width: ((scale * width as f64).round() as usize).max(1),
    }
}

/// Remove an increasing fraction of target foreground with rectangles grown
/// about the foreground centroid, and record alignment quality per level.
/// The IOU sequence is reported as-is (no monotonicity is implied).
pub fn stress_test(
    checkpoint: &Checkpoint,
    source: &Silhouette,
    full_target: &Silhouette,
    fractions: &[f64],
) -> Result<Vec<StressRecord>> {
    for w in fractions.windows(2) {
        if w[0] > w[1] {
            return Err(Error::validation("fractions must be ascending"));
        }
    }
    if let Some(bad) = fractions.iter().find(|f| !(0.0..1.0).contains(*f)) {
        return Err(Error::validation(format!("fraction {bad} outside [0,1)")));
    }
    let fg_total = full_target.foreground_count(0.5);
    if fg_total == 0 {
        return Err(Error::validation("target has no foreground"));
    }
    let centroid = foreground_centroid(full_target)?;
    let (h, w) = (full_target.height(), full_target.width());

    let mut records = Vec::with_capacity(fractions.len());
    for &requested in fractions {
        let (partial, mask, achieved) = if requested == 0.0 {
            (full_target.clone(), None, 0.0)
        } else {
            // Removed fraction grows monotonically with the rectangle scale.
            let removed = |scale: f64| -> f64 {
                let m = mask_for_scale(centroid, scale, h, w);
                let masked = apply_mask(full_target, &m);
                (fg_total - masked.foreground_count(0.5)) as f64 / fg_total as f64
            };
            let (mut lo, mut hi) = (0.0, 2.0);
            for _ in 0..40 {
                let mid = 0.5 * (lo + hi);
                if removed(mid) < requested {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            // Integer rectangle sizes make the removal fraction jumpy;
            // refine around the bisection result for the closest match.
            let base = mask_for_scale(centroid, hi, h, w);
            let mut mask = base;
            let mut best_err = f64::INFINITY;
            for dh in -3i64..=3 {
                for dw in -3i64..=3 {
                    let mh = base.mask_height as i64 + dh;
                    let mw = base.mask_width as i64 + dw;
                    if mh < 1 || mw < 1 {
                        continue;
                    }
                    let cand = RectMask {
                        center_row: centroid.0,
                        center_col: centroid.1,
                        mask_height: mh as usize,
                        mask_width: mw as usize,
                    };
                    let masked = apply_mask(full_target, &cand);
                    let frac = (fg_total - masked.foreground_count(0.5)) as f64 / fg_total as f64;
                    let err = (frac - requested).abs();
                    if err < best_err {
                        best_err = err;
                        mask = cand;
                    }
                }
            }
            let partial = apply_mask(full_target, &mask);
            let achieved = (fg_total - partial.foreground_count(0.5)) as f64 / fg_total as f64;
            (partial, Some(mask), achieved)
        };
        let inference = infer(checkpoint, source, &partial)?;
        records.push(StressRecord {
            requested_fraction: requested,
            achieved_fraction: achieved,
            iou: iou(&inference.warped, full_target, 0.5)?,
            mask,
        });
    }
    Ok(records)
}

/// Six scalars of a 2D affine map in pixel coordinates:
/// `x' = a x + b y + c`, `y' = d x + e y + f`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AffineParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub f: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        a: 1.0,
        b: 0.0,
        c: 0.0,
        d: 0.0,
        e: 1.0,
        f: 0.0,
    };

    /// Inverse map, or None when the linear part is singular.
    pub fn inverse(&self) -> Option<AffineParams> {
        let det = self.a * self.e - self.b * self.d;
        if det.abs() < 1e-12 {
            return None;
        }
        let (ia, ib, id, ie) = (self.e / det, -self.b / det, -self.d / det, self.a / det);
        Some(AffineParams {
            a: ia,
            b: ib,
            c: -(ia * self.c + ib * self.f),
            d: id,
            e: ie,
            f: -(id * self.c + ie * self.f),
        })
    }
}

/// Boundary pixels of the binarized shape: foreground with a background
/// 4-neighbor or on the image border.
pub fn contour_pixels(img: &Silhouette, threshold: f64) -> Vec<(usize, usize)> {
    let (h, w) = (img.height(), img.width());
    let fg = |r: isize, c: isize| -> bool {
        r >= 0 && c >= 0 && r < h as isize && c < w as isize && img.get(r as usize, c as usize) > threshold
    };
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if img.get(r, c) > threshold {
                let (ri, ci) = (r as isize, c as isize);
                let interior =
                    fg(ri - 1, ci) && fg(ri + 1, ci) && fg(ri, ci - 1) && fg(ri, ci + 1);
                if !interior {
                    out.push((r, c));
                }
            }
        }
    }
    out
}

/// Render the source under the affine map (backward bilinear lookup through
/// the inverse; unreachable pixels read as background).
pub fn apply_affine(source: &Silhouette, params: &AffineParams) -> Result<Silhouette> {
    let inv = params
        .inverse()
        .ok_or_else(|| Error::validation("affine map is singular"))?;
    let (h, w) = (source.height(), source.width());
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let x = c as f64;
            let y = r as f64;
            let sx = inv.a * x + inv.b * y + inv.c;
            let sy = inv.d * x + inv.e * y + inv.f;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let tap = |rr: isize, cc: isize| -> f64 {
                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                    0.0
                } else {
                    source.get(rr as usize, cc as usize)
                }
            };
            let (xi, yi) = (x0 as isize, y0 as isize);
            out[r * w + c] = ((1.0 - fy) * (1.0 - fx) * tap(yi, xi)
                + (1.0 - fy) * fx * tap(yi, xi + 1)
                + fy * (1.0 - fx) * tap(yi + 1, xi)
                + fy * fx * tap(yi + 1, xi + 1))
                .clamp(0.0, 1.0);
        }
    }
    Silhouette::new(h, w, out)
}

/// Settings for the affine baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RansacConfig {
    pub trials: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            trials: 2000,
            seed: 0,
        }
    }
}

fn triangle_area(p: &[(f64, f64); 3]) -> f64 {
    0.5 * ((p[1].0 - p[0].0) * (p[2].1 - p[0].1) - (p[2].0 - p[0].0) * (p[1].1 - p[0].1)).abs()
}

/// Solve the exact affine map sending three source points to three target
/// points. Returns None when the system is degenerate.
fn solve_affine(src: &[(f64, f64); 3], dst: &[(f64, f64); 3]) -> Option<AffineParams> {
    // Solve the 3x3 system [x y 1] * row = target component via Cramer.
    let det = src[0].0 * (src[1].1 - src[2].1) - src[0].1 * (src[1].0 - src[2].0)
        + (src[1].0 * src[2].1 - src[2].0 * src[1].1);
    if det.abs() < 1e-9 {
        return None;
    }
    let solve_row = |t0: f64, t1: f64, t2: f64| -> (f64, f64, f64) {
        let da = t0 * (src[1].1 - src[2].1) - src[0].1 * (t1 - t2) + (t1 * src[2].1 - t2 * src[1].1);
        let db = src[0].0 * (t1 - t2) - t0 * (src[1].0 - src[2].0) + (src[1].0 * t2 - src[2].0 * t1);
        let dc = src[0].0 * (src[1].1 * t2 - src[2].1 * t1) - src[0].1 * (src[1].0 * t2 - src[2].0 * t1)
            + t0 * (src[1].0 * src[2].1 - src[2].0 * src[1].1);
        (da / det, db / det, dc / det)
    };
    let (a, b, c) = solve_row(dst[0].0, dst[1].0, dst[2].0);
    let (d, e, f) = solve_row(dst[0].1, dst[1].1, dst[2].1);
    Some(AffineParams { a, b, c, d, e, f })
}

/// Correspondence-free RANSAC affine baseline: repeatedly sample three
/// contour points on each shape, solve the exact 6-DoF map, score it by the
/// IOU of the affinely warped source against the target, and keep the best.
/// The best score is non-decreasing in the trial count for a fixed seed.
pub fn ransac_affine(
    source: &Silhouette,
    target: &Silhouette,
    config: &RansacConfig,
) -> Result<(AffineParams, Silhouette, f64)> {
    if config.trials == 0 {
        return Err(Error::validation("ransac needs at least one trial"));
    }
    if source.height() != target.height() || source.width() != target.width() {
        return Err(Error::validation("ransac dimension mismatch"));
    }
    let src_contour = contour_pixels(source, 0.5);
    let dst_contour = contour_pixels(target, 0.5);
    if src_contour.len() < 3 || dst_contour.len() < 3 {
        return Err(Error::validation("need at least 3 contour pixels on each shape"));
    }
    let as_xy = |p: &(usize, usize)| (p.1 as f64, p.0 as f64);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<(AffineParams, Silhouette, f64)> = None;
    let mut produced_any = false;
    for _ in 0..config.trials {
        // Rejection-sample a non-degenerate triple on each contour.
        let mut found = None;
        for _ in 0..100 {
            let pick = |rng: &mut ChaCha8Rng, contour: &[(usize, usize)]| -> [(f64, f64); 3] {
                let mut idx = [0usize; 3];
                idx[0] = rng.gen_range(0..contour.len());
                loop {
                    idx[1] = rng.gen_range(0..contour.len());
                    if idx[1] != idx[0] {
                        break;
                    }
                }
                loop {
                    idx[2] = rng.gen_range(0..contour.len());
                    if idx[2] != idx[0] && idx[2] != idx[1] {
                        break;
                    }
                }
                [as_xy(&contour[idx[0]]), as_xy(&contour[idx[1]]), as_xy(&contour[idx[2]])]
            };
            let s3 = pick(&mut rng, &src_contour);
            let d3 = pick(&mut rng, &dst_contour);
            if triangle_area(&s3) < 0.5 || triangle_area(&d3) < 0.5 {
                continue;
            }
            if let Some(params) = solve_affine(&s3, &d3) {
                if params.inverse().is_some() {
                    found = Some(params);
                    break;
                }
            }
        }
        let Some(params) = found else { continue };
        produced_any = true;
        let warped = apply_affine(source, &params)?;
        let score = iou(&warped, target, 0.5)?;
        if best.as_ref().map(|(_, _, s)| score > *s).unwrap_or(true) {
            best = Some((params, warped, score));
        }
    }
    match best {
        Some(b) => Ok(b),
        None => {
            debug_assert!(!produced_any);
            Err(Error::validation("all sampled triples were degenerate"))
        }
    }
}

/// Horizontal strip of images separated by a thin gray rule, for qualitative
/// side-by-side inspection (source | partial | warped | full).
pub fn write_strip(images: &[&Silhouette], path: impl AsRef<Path>) -> Result<()> {
    if images.is_empty() {
        return Err(Error::validation("strip needs at least one image"));
    }
    let h = images[0].height();
    for img in images {
        if img.height() != h {
            return Err(Error::validation("strip images must share height"));
        }
    }
    let sep = 2usize;
    let total_w: usize = images.iter().map(|i| i.width()).sum::<usize>() + sep * (images.len() - 1);
    let mut out = image::GrayImage::from_pixel(total_w as u32, h as u32, image::Luma([128u8]));
    let mut x0 = 0usize;
    for img in images {
        for r in 0..h {
            for c in 0..img.width() {
                let v = (img.get(r, c) * 255.0).round().clamp(0.0, 255.0) as u8;
                out.put_pixel((x0 + c) as u32, r as u32, image::Luma([v]));
            }
        }
        x0 += img.width() + sep;
    }
    out.save(path.as_ref())?;
    Ok(())
}

/// Evaluation file names produced by the CLI.
pub fn report_paths(out_dir: &Path) -> (PathBuf, PathBuf) {
    (out_dir.join("eval.csv"), out_dir.join("eval_summary.json"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regressor::{init_params, save_checkpoint};
    use crate::synth::{generate_dataset, ShapeKind};
    use crate::trainer::split_dataset;

    fn fresh_checkpoint(dir: &Path, resolution: usize) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let params = init_params(&mut rng, 8, 8, resolution).unwrap();
        let path = dir.join("fresh.ckpt");
        save_checkpoint(&path, &params, None, 0, "tvm", serde_json::json!({})).unwrap();
        Checkpoint::load(&path).unwrap()
    }

    fn shape(resolution: usize, seed: u64) -> Silhouette {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        crate::synth::random_shape(ShapeKind::Ellipse, resolution, &mut rng)
    }

    #[test]
    fn untrained_inference_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = fresh_checkpoint(dir.path(), 32);
        let s = shape(32, 1);
        let t = shape(32, 2);
        let inf = infer(&ckpt, &s, &t).unwrap();
        let max_err = inf
            .warped
            .values()
            .iter()
            .zip(s.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-9);
        assert!(inf.smoothness < 1e-9);

        // Bitwise repeatability and checkpoint immutability.
        let bytes_before = std::fs::read(dir.path().join("fresh.ckpt")).unwrap();
        let again = infer(&ckpt, &s, &t).unwrap();
        assert_eq!(inf.warped, again.warped);
        assert_eq!(inf.control, again.control);
        let bytes_after = std::fs::read(dir.path().join("fresh.ckpt")).unwrap();
        assert_eq!(bytes_before, bytes_after);
    }

    #[test]
    fn eval_pair_count_and_protocol_none() {
        let data_dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        generate_dataset(ShapeKind::Ellipse, 64, 32, &mut rng, data_dir.path()).unwrap();
        let dataset = split_dataset(data_dir.path(), 3, 32).unwrap();
        assert_eq!(dataset.test_items.len(), 30);

        let ckpt_dir = tempfile::tempdir().unwrap();
        let ckpt = fresh_checkpoint(ckpt_dir.path(), 32);
        let report = eval_testset(&ckpt, &dataset, MaskProtocol::None, 9).unwrap();
        assert_eq!(report.records.len(), 870);
        for r in &report.records {
            assert_eq!(r.iou_partial_input, r.iou_full_input);
            assert!((0.0..=1.0).contains(&r.iou_partial_input));
            assert_eq!(r.warp_consistency, 0.0);
        }
        // Aggregate equals the independent mean of the records.
        let mean: f64 = report.records.iter().map(|r| r.iou_partial_input).sum::<f64>()
            / report.records.len() as f64;
        assert!((report.mean_iou_partial - mean).abs() < 1e-12);
    }

    #[test]
    fn agnosticism_untrained_zero_warp_diff() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = fresh_checkpoint(dir.path(), 32);
        let s = shape(32, 3);
        let t = shape(32, 4);
        let masks = vec![
            RectMask::new(10, 10, 6, 6).unwrap(),
            RectMask::new(20, 20, 8, 5).unwrap(),
            RectMask::new(16, 12, 4, 9).unwrap(),
        ];
        let score = partial_agnosticism_score(&ckpt, &s, &t, &masks).unwrap();
        // The untrained net ignores its input: identical warps everywhere.
        assert_eq!(score.mean_max_warp_diff, 0.0);
        assert_eq!(score.mean_pairwise_output_iou, 1.0);
        assert_eq!(score.variants, 4);
        assert!(partial_agnosticism_score(&ckpt, &s, &t, &masks[..1]).is_err());
    }

    #[test]
    fn stress_levels_hit_requested_fractions() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = fresh_checkpoint(dir.path(), 64);
        let s = shape(64, 6);
        let t = shape(64, 7);
        let records = stress_test(&ckpt, &s, &t, &[0.0, 0.25, 0.5]).unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(records[0].achieved_fraction, 0.0);
        assert!(records[0].mask.is_none());
        for r in &records[1..] {
            assert!(
                (r.achieved_fraction - r.requested_fraction).abs() <= 0.05,
                "requested {} achieved {}",
                r.requested_fraction,
                r.achieved_fraction
            );
        }
        // Fraction 0 equals full-target inference.
        let full = infer(&ckpt, &s, &t).unwrap();
        let full_iou = iou(&full.warped, &t, 0.5).unwrap();
        assert_eq!(records[0].iou, full_iou);
        assert!(stress_test(&ckpt, &s, &t, &[0.5, 0.2]).is_err());
    }

    #[test]
    fn ransac_identity_pair() {
        let s = shape(48, 8);
        // The identity triple solves to the identity map and scores 1.0.
        let contour = contour_pixels(&s, 0.5);
        let triple = [
            (contour[0].1 as f64, contour[0].0 as f64),
            (contour[contour.len() / 3].1 as f64, contour[contour.len() / 3].0 as f64),
            (contour[2 * contour.len() / 3].1 as f64, contour[2 * contour.len() / 3].0 as f64),
        ];
        let params = solve_affine(&triple, &triple).unwrap();
        for (got, want) in [
            (params.a, 1.0),
            (params.b, 0.0),
            (params.c, 0.0),
            (params.d, 0.0),
            (params.e, 1.0),
            (params.f, 0.0),
        ] {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
        let warped = apply_affine(&s, &params).unwrap();
        assert_eq!(iou(&warped, &s, 0.5).unwrap(), 1.0);

        // Random sampling also reaches a high overlap.
        let config = RansacConfig { trials: 2000, seed: 4 };
        let (_, _, score) = ransac_affine(&s, &s, &config).unwrap();
        assert!(score >= 0.9, "score {score}");
    }

    #[test]
    fn ransac_recovers_translation() {
        // Disk translated by (3 px, 5 px); on a circle any rotation of the
        // correspondence yields the same rigid motion, which keeps the
        // acceptance probability per trial workable.
        let mut base = Silhouette::zeros(48, 48).unwrap();
        for r in 0..48 {
            for c in 0..48 {
                if (r as f64 - 20.0).powi(2) + (c as f64 - 20.0).powi(2) <= 144.0 {
                    base.set(r, c, 1.0);
                }
            }
        }
        let mut target = Silhouette::zeros(48, 48).unwrap();
        for r in 0..48 {
            for c in 0..48 {
                if base.get(r, c) > 0.5 {
                    target.set(r + 3, c + 5, 1.0);
                }
            }
        }
        let config = RansacConfig { trials: 12000, seed: 11 };
        let (params, warped, score) = ransac_affine(&base, &target, &config).unwrap();
        assert!(score >= 0.95, "score {score}");
        assert!(iou(&warped, &target, 0.5).unwrap() >= 0.95);
        // The best map carries the translation (measured at the center).
        let tx = params.a * 20.0 + params.b * 20.0 + params.c - 20.0;
        let ty = params.d * 20.0 + params.e * 20.0 + params.f - 20.0;
        assert!((tx - 5.0).abs() < 2.0, "tx {tx}");
        assert!((ty - 3.0).abs() < 2.0, "ty {ty}");
    }

    #[test]
    fn ransac_running_best_monotone_in_trials() {
        let s = shape(48, 12);
        let t = shape(48, 13);
        let short = ransac_affine(&s, &t, &RansacConfig { trials: 50, seed: 2 }).unwrap();
        let long = ransac_affine(&s, &t, &RansacConfig { trials: 500, seed: 2 }).unwrap();
        assert!(long.2 >= short.2);
        assert!(ransac_affine(&s, &t, &RansacConfig { trials: 0, seed: 2 }).is_err());
    }

    #[test]
    fn strip_concatenates_widths() {
        let dir = tempfile::tempdir().unwrap();
        let s = shape(32, 14);
        let t = shape(32, 15);
        let path = dir.path().join("strip.png");
        write_strip(&[&s, &t, &s], &path).unwrap();
        let img = image::open(&path).unwrap();
        assert_eq!(img.width(), 32 * 3 + 2 * 2);
        assert_eq!(img.height(), 32);
    }
}
