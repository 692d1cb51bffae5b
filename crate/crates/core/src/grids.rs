//! Dense silhouette fields, rectangular masking, IOU, and the normalized
//! coordinate convention shared by every other module.
//!
//! Images are row-major scalar fields with values in `[0, 1]`; background is
//! 0 and foreground is 1. Pixel `i` of an axis with `n` samples sits at
//! normalized coordinate `-1 + 2i/(n-1)`, so the image corners map to
//! `(-1,-1)` and `(+1,+1)`.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense H×W grayscale field in `[0,1]` representing a binary shape image.
#[derive(Debug, Clone, PartialEq)]
pub struct Silhouette {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Silhouette {
    /// Build from row-major values. Dimensions must be at least 2×2 and all
    /// values finite within `[0,1]`.
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(Error::validation(format!(
                "silhouette must be at least 2x2, got {height}x{width}"
            )));
        }
        if values.len() != height * width {
            return Err(Error::validation(format!(
                "expected {} values for {height}x{width}, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::validation(format!(
                "silhouette values must be finite within [0,1], found {v}"
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    /// All-zero (background) field.
    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0.0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.values[row * self.width + col] = value.clamp(0.0, 1.0);
    }

    /// Number of pixels strictly above `threshold`.
    pub fn foreground_count(&self, threshold: f64) -> usize {
        self.values.iter().filter(|v| **v > threshold).count()
    }

    /// Row-major indices of pixels strictly above `threshold`.
    pub fn foreground_pixels(&self, threshold: f64) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) > threshold {
                    out.push((r, c));
                }
            }
        }
        out
    }

    /// Snap every value to {0,1} by comparison against `threshold`.
    pub fn binarize(&self, threshold: f64) -> Silhouette {
        let values = self
            .values
            .iter()
            .map(|v| if *v > threshold { 1.0 } else { 0.0 })
            .collect();
        Silhouette {
            height: self.height,
            width: self.width,
            values,
        }
    }
}

/// Axis-aligned rectangular occlusion descriptor.
///
/// The rectangle spans `mask_height` rows starting at
/// `center_row - mask_height/2` (integer division), clipped to the image,
/// and likewise for columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RectMask {
    pub center_row: usize,
    pub center_col: usize,
    pub mask_height: usize,
    pub mask_width: usize,
}

impl RectMask {
    pub fn new(center_row: usize, center_col: usize, mask_height: usize, mask_width: usize) -> Result<Self> {
        if mask_height == 0 || mask_width == 0 {
            return Err(Error::validation("mask dimensions must be at least 1"));
        }
        Ok(Self {
            center_row,
            center_col,
            mask_height,
            mask_width,
        })
    }

    /// Row/column bounds `[start, end)` clipped to an image of the given size.
    pub fn clipped_bounds(&self, height: usize, width: usize) -> (usize, usize, usize, usize) {
        let top = self.center_row.saturating_sub(self.mask_height / 2);
        let left = self.center_col.saturating_sub(self.mask_width / 2);
        let bottom = (top + self.mask_height).min(height);
        let right = (left + self.mask_width).min(width);
        (top, bottom.max(top), left, right.max(left))
    }
}

/// A point in the normalized `[-1,1]²` coordinate space; `x` runs along
/// columns and `y` along rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedCoord {
    pub x: f64,
    pub y: f64,
}

impl NormalizedCoord {
    /// Normalized coordinate of pixel `(row, col)` in an H×W image.
    pub fn from_pixel(row: usize, col: usize, height: usize, width: usize) -> Self {
        Self {
            x: pixel_to_norm(col, width),
            y: pixel_to_norm(row, height),
        }
    }
}

/// Normalized coordinate of sample `i` on an axis with `n` samples.
#[inline]
pub fn pixel_to_norm(i: usize, n: usize) -> f64 {
    -1.0 + 2.0 * i as f64 / (n as f64 - 1.0)
}

/// Fractional pixel position of a normalized coordinate on an axis with `n`
/// samples. Inverse of [`pixel_to_norm`].
#[inline]
pub fn norm_to_pixel(x: f64, n: usize) -> f64 {
    (x + 1.0) * 0.5 * (n as f64 - 1.0)
}

/// Load a silhouette from a raster image file. RGB inputs are converted to
/// luminance first. If `threshold > 0` every value is snapped to {0,1}.
pub fn load_silhouette(path: impl AsRef<Path>, threshold: f64) -> Result<Silhouette> {
    let img = image::open(path.as_ref())?;
    let gray = img.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::validation("zero-size image"));
    }
    let values: Vec<f64> = gray.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
    let sil = Silhouette::new(h, w, values)?;
    if threshold > 0.0 {
        Ok(sil.binarize(threshold))
    } else {
        Ok(sil)
    }
}

/// Write a silhouette as an 8-bit grayscale PNG. Binary images round-trip
/// bit-exactly through [`load_silhouette`].
pub fn save_silhouette(sil: &Silhouette, path: impl AsRef<Path>) -> Result<()> {
    let mut img = image::GrayImage::new(sil.width() as u32, sil.height() as u32);
    for r in 0..sil.height() {
        for c in 0..sil.width() {
            let v = (sil.get(r, c) * 255.0).round().clamp(0.0, 255.0) as u8;
            img.put_pixel(c as u32, r as u32, image::Luma([v]));
        }
    }
    img.save(path.as_ref())?;
    Ok(())
}

/// Copy of `target` with all pixels inside the clipped mask rectangle set to
/// background (0). The input is not modified.
pub fn apply_mask(target: &Silhouette, mask: &RectMask) -> Silhouette {
    let mut out = target.clone();
    let (top, bottom, left, right) = mask.clipped_bounds(target.height(), target.width());
    for r in top..bottom {
        for c in left..right {
            out.set(r, c, 0.0);
        }
    }
    out
}

/// Multiply `target` by an arbitrary mask field (1 keeps, 0 removes).
/// Supports non-rectangular partial data without a rectangle descriptor.
pub fn apply_mask_image(target: &Silhouette, mask: &Silhouette) -> Result<Silhouette> {
    if target.height() != mask.height() || target.width() != mask.width() {
        return Err(Error::validation(format!(
            "mask size {}x{} does not match target {}x{}",
            mask.height(),
            mask.width(),
            target.height(),
            target.width()
        )));
    }
    let values = target
        .values()
        .iter()
        .zip(mask.values())
        .map(|(t, m)| t * m)
        .collect();
    Silhouette::new(target.height(), target.width(), values)
}

/// Draw a random rectangular mask: the center is uniform over foreground
/// pixels (value > 0.5) and each side length is an independent uniform
/// fraction of the corresponding image dimension, rounded to at least 1.
///
/// Draw order is fixed (center, then height fraction, then width fraction)
/// so results are reproducible from the generator seed.
pub fn random_mask(
    target: &Silhouette,
    size_range: (f64, f64),
    rng: &mut impl Rng,
) -> Result<RectMask> {
    let (lo, hi) = size_range;
    if !(lo > 0.0 && hi <= 1.0 && lo <= hi) {
        return Err(Error::validation(format!(
            "size range must satisfy 0 < lo <= hi <= 1, got [{lo}, {hi}]"
        )));
    }
    let foreground = target.foreground_pixels(0.5);
    if foreground.is_empty() {
        return Err(Error::validation("target has no foreground pixel"));
    }
    let (center_row, center_col) = foreground[rng.gen_range(0..foreground.len())];
    let hfrac = rng.gen_range(lo..=hi);
    let wfrac = rng.gen_range(lo..=hi);
    let mask_height = ((hfrac * target.height() as f64).round() as usize).max(1);
    let mask_width = ((wfrac * target.width() as f64).round() as usize).max(1);
    RectMask::new(center_row, center_col, mask_height, mask_width)
}

/// Intersection over union of the two binarized fields. Returns 1 when both
/// binarizations are empty.
pub fn iou(a: &Silhouette, b: &Silhouette, threshold: f64) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::validation(format!(
            "iou dimension mismatch: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (va, vb) in a.values().iter().zip(b.values()) {
        let fa = *va > threshold;
        let fb = *vb > threshold;
        if fa && fb {
            inter += 1;
        }
        if fa || fb {
            union += 1;
        }
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant(h: usize, w: usize, v: f64) -> Silhouette {
        Silhouette::new(h, w, vec![v; h * w]).unwrap()
    }

    fn square(h: usize, w: usize, top: usize, left: usize, side_h: usize, side_w: usize) -> Silhouette {
        let mut s = Silhouette::zeros(h, w).unwrap();
        for r in top..top + side_h {
            for c in left..left + side_w {
                s.set(r, c, 1.0);
            }
        }
        s
    }

    #[test]
    fn load_constant_images() {
        let dir = tempfile::tempdir().unwrap();
        let black = dir.path().join("black.png");
        let white = dir.path().join("white.png");
        save_silhouette(&constant(64, 64, 0.0), &black).unwrap();
        save_silhouette(&constant(64, 64, 1.0), &white).unwrap();

        let loaded = load_silhouette(&black, 0.5).unwrap();
        assert!(loaded.values().iter().all(|v| *v == 0.0));
        let loaded = load_silhouette(&white, 0.5).unwrap();
        assert!(loaded.values().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn load_checkerboard_foreground_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checker.png");
        let mut s = Silhouette::zeros(64, 64).unwrap();
        for r in 0..64 {
            for c in 0..64 {
                if (r + c) % 2 == 0 {
                    s.set(r, c, 1.0);
                }
            }
        }
        save_silhouette(&s, &path).unwrap();
        let loaded = load_silhouette(&path, 0.5).unwrap();

        // Independent per-pixel loop oracle.
        let mut expected = 0usize;
        for r in 0..64 {
            for c in 0..64 {
                if (r + c) % 2 == 0 {
                    expected += 1;
                }
            }
        }
        assert_eq!(expected, 64 * 64 / 2);
        assert_eq!(loaded.foreground_count(0.5), expected);
        for r in 0..64 {
            for c in 0..64 {
                let want = if (r + c) % 2 == 0 { 1.0 } else { 0.0 };
                assert_eq!(loaded.get(r, c), want);
            }
        }
    }

    #[test]
    fn binary_png_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("shape.png");
        let s = square(32, 32, 5, 7, 11, 13);
        save_silhouette(&s, &path).unwrap();
        let loaded = load_silhouette(&path, 0.0).unwrap();
        assert_eq!(loaded, s);
    }

    #[test]
    fn mask_full_occlusion() {
        let target = constant(16, 16, 1.0);
        let mask = RectMask::new(8, 8, 16, 16).unwrap();
        let out = apply_mask(&target, &mask);
        assert_eq!(out.foreground_count(0.5), 0);
    }

    #[test]
    fn mask_noop_on_background() {
        let target = square(16, 16, 2, 2, 4, 4);
        let mask = RectMask::new(14, 14, 1, 1).unwrap();
        let out = apply_mask(&target, &mask);
        assert_eq!(out, target);
    }

    #[test]
    fn mask_pixel_count_oracle() {
        let target = constant(64, 64, 1.0);
        let mask = RectMask::new(32, 32, 16, 16).unwrap();
        let out = apply_mask(&target, &mask);
        assert_eq!(out.foreground_count(0.5), 4096 - 256);
    }

    #[test]
    fn mask_never_increases_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let mut t = Silhouette::zeros(20, 24).unwrap();
            for r in 0..20 {
                for c in 0..24 {
                    t.set(r, c, rng.gen_range(0.0..=1.0));
                }
            }
            let mask = RectMask::new(
                rng.gen_range(0..20),
                rng.gen_range(0..24),
                rng.gen_range(1..=20),
                rng.gen_range(1..=24),
            )
            .unwrap();
            let out = apply_mask(&t, &mask);
            for (o, i) in out.values().iter().zip(t.values()) {
                assert!(o <= i);
            }
        }
    }

    #[test]
    fn random_mask_singleton_foreground() {
        let target = square(32, 32, 10, 10, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mask = random_mask(&target, (0.2, 0.6), &mut rng).unwrap();
        assert_eq!((mask.center_row, mask.center_col), (10, 10));
    }

    #[test]
    fn random_mask_deterministic() {
        let target = constant(32, 32, 1.0);
        let a = random_mask(&target, (0.2, 0.6), &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = random_mask(&target, (0.2, 0.6), &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn random_mask_rejects_empty_target() {
        let target = constant(8, 8, 0.0);
        let err = random_mask(&target, (0.2, 0.6), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(err.is_err());
    }

    #[test]
    fn random_mask_mean_height_fraction() {
        // Monte-Carlo mean of Uniform(0.25, 0.5) is 0.375.
        let target = constant(64, 64, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let n = 10_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let mask = random_mask(&target, (0.25, 0.5), &mut rng).unwrap();
            sum += mask.mask_height as f64 / 64.0;
        }
        let mean = sum / n as f64;
        assert!((0.36..=0.39).contains(&mean), "mean {mean} out of range");
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = square(20, 20, 2, 2, 5, 5);
        assert_eq!(iou(&a, &a, 0.5).unwrap(), 1.0);

        let b = square(20, 20, 12, 12, 5, 5);
        assert_eq!(iou(&a, &b, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn iou_overlap_strip_oracle() {
        // Two 10x10 squares overlapping in a 5x10 strip: 50 / 150.
        let a = square(30, 30, 0, 0, 10, 10);
        let b = square(30, 30, 5, 0, 10, 10);
        let v = iou(&a, &b, 0.5).unwrap();
        assert!((v - 50.0 / 150.0).abs() < 1e-15);
    }

    #[test]
    fn iou_symmetric_and_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let a = square(
                16,
                16,
                rng.gen_range(0..8),
                rng.gen_range(0..8),
                rng.gen_range(1..8),
                rng.gen_range(1..8),
            );
            let b = square(
                16,
                16,
                rng.gen_range(0..8),
                rng.gen_range(0..8),
                rng.gen_range(1..8),
                rng.gen_range(1..8),
            );
            assert_eq!(iou(&a, &b, 0.5).unwrap(), iou(&b, &a, 0.5).unwrap());
        }
        let empty = constant(8, 8, 0.0);
        assert_eq!(iou(&empty, &empty, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn iou_dimension_mismatch() {
        let a = constant(8, 8, 1.0);
        let b = constant(8, 9, 1.0);
        assert!(iou(&a, &b, 0.5).is_err());
    }

    #[test]
    fn mask_json_roundtrip() {
        let mask = RectMask::new(3, 4, 5, 6).unwrap();
        let json = serde_json::to_string(&mask).unwrap();
        assert!(json.contains("center_row"));
        let back: RectMask = serde_json::from_str(&json).unwrap();
        assert_eq!(back, mask);
    }
}
