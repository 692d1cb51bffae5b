//! Procedural silhouette generators (ellipses, rounded rectangles, crosses)
//! with parameter jitter, so training and evaluation can run without any
//! external shape data.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::grids::{save_silhouette, Silhouette};

/// Shape families the generator can produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Ellipse,
    RoundedRect,
    Cross,
}

impl ShapeKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ellipse" => Ok(Self::Ellipse),
            "rounded-rect" | "rounded_rect" | "rect" => Ok(Self::RoundedRect),
            "cross" => Ok(Self::Cross),
            other => Err(Error::validation(format!(
                "unknown shape kind '{other}' (expected ellipse, rounded-rect, cross)"
            ))),
        }
    }
}

fn paint(resolution: usize, inside: impl Fn(f64, f64) -> bool) -> Silhouette {
    let mut s = Silhouette::zeros(resolution, resolution).unwrap();
    for r in 0..resolution {
        for c in 0..resolution {
            // Pixel-center membership test.
            if inside(c as f64 + 0.5, r as f64 + 0.5) {
                s.set(r, c, 1.0);
            }
        }
    }
    s
}

/// One random instance of the given family. Jitter ranges are fractions of
/// the resolution and keep every shape inside the frame with a margin.
/// Ellipses jitter tightly, like same-class object renders; the other
/// families vary more.
pub fn random_shape(kind: ShapeKind, resolution: usize, rng: &mut impl Rng) -> Silhouette {
    let res = resolution as f64;
    match kind {
        ShapeKind::Ellipse => {
            let cx = res * 0.5 + rng.gen_range(-0.03..0.03) * res;
            let cy = res * 0.5 + rng.gen_range(-0.03..0.03) * res;
            let a = rng.gen_range(0.22..0.28) * res;
            let b = rng.gen_range(0.22..0.28) * res;
            paint(resolution, |x, y| {
                let dx = (x - cx) / a;
                let dy = (y - cy) / b;
                dx * dx + dy * dy <= 1.0
            })
        }
        ShapeKind::RoundedRect => {
            let cx = res * 0.5 + rng.gen_range(-0.09..0.09) * res;
            let cy = res * 0.5 + rng.gen_range(-0.09..0.09) * res;
            let hw = rng.gen_range(0.14..0.32) * res;
            let hh = rng.gen_range(0.14..0.32) * res;
            let radius = rng.gen_range(0.2..0.6) * hw.min(hh);
            paint(resolution, |x, y| {
                let qx = (x - cx).abs() - (hw - radius);
                let qy = (y - cy).abs() - (hh - radius);
                let ox = qx.max(0.0);
                let oy = qy.max(0.0);
                (ox * ox + oy * oy).sqrt() + qx.max(qy).min(0.0) <= radius
            })
        }
        ShapeKind::Cross => {
            let cx = res * 0.5 + rng.gen_range(-0.09..0.09) * res;
            let cy = res * 0.5 + rng.gen_range(-0.09..0.09) * res;
            let arm_v = rng.gen_range(0.24..0.4) * res;
            let arm_h = rng.gen_range(0.16..0.3) * res;
            let thick = rng.gen_range(0.05..0.1) * res;
            paint(resolution, |x, y| {
                let dx = (x - cx).abs();
                let dy = (y - cy).abs();
                (dx <= thick && dy <= arm_v) || (dy <= thick && dx <= arm_h)
            })
        }
    }
}

/// Generate `count` shapes and write them as zero-padded `shape_NNNN.png`
/// files under `out_dir`. Returns the file paths in generation order.
pub fn generate_dataset(
    kind: ShapeKind,
    count: usize,
    resolution: usize,
    rng: &mut impl Rng,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<std::path::PathBuf>> {
    if count == 0 {
        return Err(Error::validation("dataset must contain at least one shape"));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let mut paths = Vec::with_capacity(count);
    for i in 0..count {
        let shape = random_shape(kind, resolution, rng);
        let path = out_dir.join(format!("shape_{i:04}.png"));
        save_silhouette(&shape, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_have_foreground_and_margin() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kind in [ShapeKind::Ellipse, ShapeKind::RoundedRect, ShapeKind::Cross] {
            for _ in 0..20 {
                let s = random_shape(kind, 64, &mut rng);
                let fg = s.foreground_count(0.5);
                assert!(fg > 50, "{kind:?} too small: {fg}");
                assert!(fg < 64 * 64 / 2, "{kind:?} too big: {fg}");
                // Nothing touches the border.
                for i in 0..64 {
                    assert_eq!(s.get(0, i), 0.0);
                    assert_eq!(s.get(63, i), 0.0);
                    assert_eq!(s.get(i, 0), 0.0);
                    assert_eq!(s.get(i, 63), 0.0);
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = random_shape(ShapeKind::Ellipse, 32, &mut ChaCha8Rng::seed_from_u64(9));
        let b = random_shape(ShapeKind::Ellipse, 32, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn dataset_written_to_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let paths = generate_dataset(ShapeKind::Cross, 5, 32, &mut rng, dir.path()).unwrap();
        assert_eq!(paths.len(), 5);
        for p in &paths {
            assert!(p.exists());
        }
    }
}
