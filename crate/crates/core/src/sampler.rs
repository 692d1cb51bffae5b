//! Differentiable FFD warping: bilinear upsampling of the control grid to a
//! dense per-pixel lookup field and bilinear resampling of the source image,
//! each with an exact adjoint. Also global-rotation warp fields and warp
//! composition.
//!
//! Lookups are backward warps: output pixel `p` copies the source value at
//! the (fractional) location stored in the warp at `p`. Image lookups
//! outside `[-1,1]` read as background (zero padding); coordinate-field
//! lookups in [`compose`] clamp to the border instead, because coordinates
//! have no meaningful value outside the domain.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::{norm_to_pixel, pixel_to_norm, Silhouette};
use crate::parametrization::ControlWarp;

/// Dense H×W field of per-pixel lookup coordinates in normalized space.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseWarp {
    pub height: usize,
    pub width: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl DenseWarp {
    pub fn new(height: usize, width: usize, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(Error::validation("dense warp must be at least 2x2"));
        }
        if x.len() != height * width || y.len() != height * width {
            return Err(Error::validation("dense warp plane length must equal height*width"));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::validation("dense warp contains non-finite values"));
        }
        Ok(Self { height, width, x, y })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            x: vec![0.0; height * width],
            y: vec![0.0; height * width],
        }
    }

    /// The identity lookup field: every pixel reads its own position.
    pub fn identity(height: usize, width: usize) -> Self {
        let mut warp = Self::zeros(height, width);
        for r in 0..height {
            let ny = pixel_to_norm(r, height);
            for c in 0..width {
                warp.x[r * width + c] = pixel_to_norm(c, width);
                warp.y[r * width + c] = ny;
            }
        }
        warp
    }

    #[inline]
    pub fn idx(&self, r: usize, c: usize) -> usize {
        r * self.width + c
    }

    pub fn max_abs_diff(&self, other: &DenseWarp) -> f64 {
        self.x
            .iter()
            .zip(&other.x)
            .chain(self.y.iter().zip(&other.y))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Gradient of a scalar loss with respect to a control warp. The offset
/// slots are only populated once the integrator adjoint has run; the
/// upsampling adjoint leaves them at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpGradients {
    pub m: usize,
    pub n: usize,
    pub d_control_x: Vec<f64>,
    pub d_control_y: Vec<f64>,
    pub d_offset_x: f64,
    pub d_offset_y: f64,
}

/// Weights and node indices of the bilinear cell containing a fractional
/// grid position, with the position clamped into the node lattice.
#[inline]
fn bilinear_cell(pos: f64, len: usize) -> (usize, f64) {
    let max_cell = len - 2;
    let floor = pos.floor();
    let mut i0 = floor as isize;
    if i0 < 0 {
        i0 = 0;
    }
    let i0 = (i0 as usize).min(max_cell);
    (i0, pos - i0 as f64)
}

/// Bilinearly interpolate the control grid over a full-resolution pixel
/// lattice. The grid is anchored so node `(r,c)` sits at the normalized
/// position of a regular m×n lattice spanning the whole image; the result is
/// exact at node positions.
pub fn upsample(control: &ControlWarp, height: usize, width: usize) -> Result<DenseWarp> {
    if height < 2 || width < 2 {
        return Err(Error::validation("upsample target must be at least 2x2"));
    }
    let (m, n) = (control.m, control.n);
    let mut out = DenseWarp::zeros(height, width);
    let row_scale = (m as f64 - 1.0) / (height as f64 - 1.0);
    let col_scale = (n as f64 - 1.0) / (width as f64 - 1.0);
    for r in 0..height {
        let gy = r as f64 * row_scale;
        let (r0, fy) = bilinear_cell(gy, m);
        for c in 0..width {
            let gx = c as f64 * col_scale;
            let (c0, fx) = bilinear_cell(gx, n);
            let i00 = r0 * n + c0;
            let i01 = i00 + 1;
            let i10 = i00 + n;
            let i11 = i10 + 1;
            let w00 = (1.0 - fy) * (1.0 - fx);
            let w01 = (1.0 - fy) * fx;
            let w10 = fy * (1.0 - fx);
            let w11 = fy * fx;
            let o = r * width + c;
            out.x[o] = w00 * control.x[i00] + w01 * control.x[i01] + w10 * control.x[i10] + w11 * control.x[i11];
            out.y[o] = w00 * control.y[i00] + w01 * control.y[i01] + w10 * control.y[i10] + w11 * control.y[i11];
        }
    }
    Ok(out)
}

/// Exact adjoint of [`upsample`]: scatters every pixel's gradient onto the 4
/// surrounding control nodes with the forward interpolation weights.
pub fn upsample_backward(control: &ControlWarp, grad_dense: &DenseWarp) -> WarpGradients {
    let (m, n) = (control.m, control.n);
    let (height, width) = (grad_dense.height, grad_dense.width);
    let mut gx = vec![0.0; m * n];
    let mut gy = vec![0.0; m * n];
    let row_scale = (m as f64 - 1.0) / (height as f64 - 1.0);
    let col_scale = (n as f64 - 1.0) / (width as f64 - 1.0);
    for r in 0..height {
        let (r0, fy) = bilinear_cell(r as f64 * row_scale, m);
        for c in 0..width {
            let (c0, fx) = bilinear_cell(c as f64 * col_scale, n);
            let i00 = r0 * n + c0;
            let i01 = i00 + 1;
            let i10 = i00 + n;
            let i11 = i10 + 1;
            let w00 = (1.0 - fy) * (1.0 - fx);
            let w01 = (1.0 - fy) * fx;
            let w10 = fy * (1.0 - fx);
            let w11 = fy * fx;
            let o = r * width + c;
            gx[i00] += w00 * grad_dense.x[o];
            gx[i01] += w01 * grad_dense.x[o];
            gx[i10] += w10 * grad_dense.x[o];
            gx[i11] += w11 * grad_dense.x[o];
            gy[i00] += w00 * grad_dense.y[o];
            gy[i01] += w01 * grad_dense.y[o];
            gy[i10] += w10 * grad_dense.y[o];
            gy[i11] += w11 * grad_dense.y[o];
        }
    }
    WarpGradients {
        m,
        n,
        d_control_x: gx,
        d_control_y: gy,
        d_offset_x: 0.0,
        d_offset_y: 0.0,
    }
}

#[inline]
fn tap(source: &Silhouette, r: isize, c: isize) -> f64 {
    if r < 0 || c < 0 || r >= source.height() as isize || c >= source.width() as isize {
        0.0
    } else {
        source.get(r as usize, c as usize)
    }
}

/// Bilinearly sample the source at each warp coordinate. Lookups outside the
/// image read zero, so values never leave `[min(source) min 0, max(source)]`.
pub fn resample(source: &Silhouette, warp: &DenseWarp) -> Result<Silhouette> {
    if source.height() != warp.height || source.width() != warp.width {
        return Err(Error::validation(format!(
            "warp size {}x{} does not match source {}x{}",
            warp.height,
            warp.width,
            source.height(),
            source.width()
        )));
    }
    let (h, w) = (source.height(), source.width());
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let o = r * w + c;
            let px = norm_to_pixel(warp.x[o], w);
            let py = norm_to_pixel(warp.y[o], h);
            let x0 = px.floor();
            let y0 = py.floor();
            let fx = px - x0;
            let fy = py - y0;
            let (x0, y0) = (x0 as isize, y0 as isize);
            let v = (1.0 - fy) * (1.0 - fx) * tap(source, y0, x0)
                + (1.0 - fy) * fx * tap(source, y0, x0 + 1)
                + fy * (1.0 - fx) * tap(source, y0 + 1, x0)
                + fy * fx * tap(source, y0 + 1, x0 + 1);
            out[o] = v.clamp(0.0, 1.0);
        }
    }
    Silhouette::new(h, w, out)
}

/// Analytic partial derivatives of [`resample`] with respect to the warp
/// coordinates (piecewise-linear kernel derivative, zero where every tap is
/// padding) and the source pixels. Clamping of the forward output is treated
/// as identity for the gradient.
pub fn resample_backward(
    source: &Silhouette,
    warp: &DenseWarp,
    grad_output: &[f64],
) -> Result<(DenseWarp, Vec<f64>)> {
    if source.height() != warp.height || source.width() != warp.width {
        return Err(Error::validation("resample_backward shape mismatch"));
    }
    if grad_output.len() != warp.height * warp.width {
        return Err(Error::validation("grad_output length mismatch"));
    }
    let (h, w) = (source.height(), source.width());
    let mut grad_warp = DenseWarp::zeros(h, w);
    let mut grad_source = vec![0.0; h * w];
    let dpx_dx = (w as f64 - 1.0) * 0.5;
    let dpy_dy = (h as f64 - 1.0) * 0.5;
    for r in 0..h {
        for c in 0..w {
            let o = r * w + c;
            let g = grad_output[o];
            if g == 0.0 {
                continue;
            }
            let px = norm_to_pixel(warp.x[o], w);
            let py = norm_to_pixel(warp.y[o], h);
            let x0f = px.floor();
            let y0f = py.floor();
            let fx = px - x0f;
            let fy = py - y0f;
            let (x0, y0) = (x0f as isize, y0f as isize);
            let s00 = tap(source, y0, x0);
            let s01 = tap(source, y0, x0 + 1);
            let s10 = tap(source, y0 + 1, x0);
            let s11 = tap(source, y0 + 1, x0 + 1);
            // d value / d fractional position.
            let dv_dfx = (1.0 - fy) * (s01 - s00) + fy * (s11 - s10);
            let dv_dfy = (1.0 - fx) * (s10 - s00) + fx * (s11 - s01);
            grad_warp.x[o] = g * dv_dfx * dpx_dx;
            grad_warp.y[o] = g * dv_dfy * dpy_dy;
            // Scatter onto the source taps that exist.
            let mut add = |rr: isize, cc: isize, wgt: f64| {
                if rr >= 0 && cc >= 0 && rr < h as isize && cc < w as isize {
                    grad_source[rr as usize * w + cc as usize] += g * wgt;
                }
            };
            add(y0, x0, (1.0 - fy) * (1.0 - fx));
            add(y0, x0 + 1, (1.0 - fy) * fx);
            add(y0 + 1, x0, fy * (1.0 - fx));
            add(y0 + 1, x0 + 1, fy * fx);
        }
    }
    Ok((grad_warp, grad_source))
}

/// Nearest-neighbor variant of [`resample`]: every output pixel copies the
/// source value closest to its lookup, or background when the rounded
/// position falls outside. Categorical data (label ids) survives unblended.
pub fn resample_nearest(source: &Silhouette, warp: &DenseWarp) -> Result<Silhouette> {
    if source.height() != warp.height || source.width() != warp.width {
        return Err(Error::validation("warp size does not match source"));
    }
    let (h, w) = (source.height(), source.width());
    let mut out = vec![0.0; h * w];
    for o in 0..h * w {
        let px = norm_to_pixel(warp.x[o], w).round();
        let py = norm_to_pixel(warp.y[o], h).round();
        if px >= 0.0 && py >= 0.0 && (px as usize) < w && (py as usize) < h {
            out[o] = source.get(py as usize, px as usize);
        }
    }
    Silhouette::new(h, w, out)
}

/// Dense warp that rotates the output by `theta` about the image center:
/// each pixel looks up its own normalized position rotated by `-theta`.
pub fn rotation_warp(theta: f64, height: usize, width: usize) -> Result<DenseWarp> {
    if !theta.is_finite() {
        return Err(Error::validation("rotation angle must be finite"));
    }
    let (s, c) = theta.sin_cos();
    let mut out = DenseWarp::zeros(height, width);
    for r in 0..height {
        let y = pixel_to_norm(r, height);
        for col in 0..width {
            let x = pixel_to_norm(col, width);
            let o = r * width + col;
            out.x[o] = c * x + s * y;
            out.y[o] = -s * x + c * y;
        }
    }
    Ok(out)
}

/// Partial derivative of [`rotation_warp`] with respect to the angle,
/// evaluated entrywise.
pub fn rotation_warp_theta_derivative(theta: f64, height: usize, width: usize) -> DenseWarp {
    let (s, c) = theta.sin_cos();
    let mut out = DenseWarp::zeros(height, width);
    for r in 0..height {
        let y = pixel_to_norm(r, height);
        for col in 0..width {
            let x = pixel_to_norm(col, width);
            let o = r * width + col;
            out.x[o] = -s * x + c * y;
            out.y[o] = -c * x - s * y;
        }
    }
    out
}

#[inline]
fn clamp_pixel(pos: f64, len: usize) -> f64 {
    pos.clamp(0.0, len as f64 - 1.0)
}

/// Compose two dense warps: the result at pixel `p` is the inner coordinate
/// field sampled (border-clamped) at the outer lookup `outer[p]`. Applying
/// the composite equals resampling with `inner` first and `outer` second:
/// `resample(s, compose(a, b)) ≈ resample(resample(s, b), a)` away from
/// padding boundaries.
pub fn compose(outer: &DenseWarp, inner: &DenseWarp) -> Result<DenseWarp> {
    if outer.height != inner.height || outer.width != inner.width {
        return Err(Error::validation("compose dimension mismatch"));
    }
    let (h, w) = (outer.height, outer.width);
    let mut out = DenseWarp::zeros(h, w);
    for o in 0..h * w {
        let px = clamp_pixel(norm_to_pixel(outer.x[o], w), w);
        let py = clamp_pixel(norm_to_pixel(outer.y[o], h), h);
        let (x0, fx) = bilinear_cell(px, w);
        let (y0, fy) = bilinear_cell(py, h);
        let i00 = y0 * w + x0;
        let i01 = i00 + 1;
        let i10 = i00 + w;
        let i11 = i10 + 1;
        let w00 = (1.0 - fy) * (1.0 - fx);
        let w01 = (1.0 - fy) * fx;
        let w10 = fy * (1.0 - fx);
        let w11 = fy * fx;
        out.x[o] = w00 * inner.x[i00] + w01 * inner.x[i01] + w10 * inner.x[i10] + w11 * inner.x[i11];
        out.y[o] = w00 * inner.y[i00] + w01 * inner.y[i01] + w10 * inner.y[i10] + w11 * inner.y[i11];
    }
    Ok(out)
}

/// Adjoint of [`compose`]: returns the gradients with respect to the outer
/// and inner coordinate fields. Border-clamped outer lookups receive zero
/// positional gradient, matching the forward clamp.
pub fn compose_backward(
    outer: &DenseWarp,
    inner: &DenseWarp,
    grad_out: &DenseWarp,
) -> Result<(DenseWarp, DenseWarp)> {
    if outer.height != inner.height || outer.width != inner.width {
        return Err(Error::validation("compose_backward dimension mismatch"));
    }
    let (h, w) = (outer.height, outer.width);
    let mut grad_outer = DenseWarp::zeros(h, w);
    let mut grad_inner = DenseWarp::zeros(h, w);
    let dpx_dx = (w as f64 - 1.0) * 0.5;
    let dpy_dy = (h as f64 - 1.0) * 0.5;
    for o in 0..h * w {
        let raw_px = norm_to_pixel(outer.x[o], w);
        let raw_py = norm_to_pixel(outer.y[o], h);
        let px = clamp_pixel(raw_px, w);
        let py = clamp_pixel(raw_py, h);
        let (x0, fx) = bilinear_cell(px, w);
        let (y0, fy) = bilinear_cell(py, h);
        let i00 = y0 * w + x0;
        let i01 = i00 + 1;
        let i10 = i00 + w;
        let i11 = i10 + 1;
        let w00 = (1.0 - fy) * (1.0 - fx);
        let w01 = (1.0 - fy) * fx;
        let w10 = fy * (1.0 - fx);
        let w11 = fy * fx;
        let (gx, gy) = (grad_out.x[o], grad_out.y[o]);
        grad_inner.x[i00] += w00 * gx;
        grad_inner.x[i01] += w01 * gx;
        grad_inner.x[i10] += w10 * gx;
        grad_inner.x[i11] += w11 * gx;
        grad_inner.y[i00] += w00 * gy;
        grad_inner.y[i01] += w01 * gy;
        grad_inner.y[i10] += w10 * gy;
        grad_inner.y[i11] += w11 * gy;
        // Positional gradient, zero where the clamp saturates.
        let in_x = raw_px > 0.0 && raw_px < (w - 1) as f64;
        let in_y = raw_py > 0.0 && raw_py < (h - 1) as f64;
        for (plane, g) in [(&inner.x, gx), (&inner.y, gy)] {
            let dfx = (1.0 - fy) * (plane[i01] - plane[i00]) + fy * (plane[i11] - plane[i10]);
            let dfy = (1.0 - fx) * (plane[i10] - plane[i00]) + fx * (plane[i11] - plane[i01]);
            if in_x {
                grad_outer.x[o] += g * dfx * dpx_dx;
            }
            if in_y {
                grad_outer.y[o] += g * dfy * dpy_dy;
            }
        }
    }
    Ok((grad_outer, grad_inner))
}

/// Metadata sidecar written next to a dense warp blob.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseWarpMeta {
    pub height: u32,
    pub width: u32,
    pub dtype: String,
    pub planes: Vec<String>,
    pub coordinate_space: String,
}

/// Write a dense warp as a little-endian binary blob: an 8-byte header
/// (height, width as u32) followed by the x plane then the y plane as f32,
/// plus a JSON metadata sidecar at `<path>.json`.
pub fn save_dense_warp(warp: &DenseWarp, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = std::fs::File::create(path)?;
    file.write_all(&(warp.height as u32).to_le_bytes())?;
    file.write_all(&(warp.width as u32).to_le_bytes())?;
    for plane in [&warp.x, &warp.y] {
        for v in plane {
            file.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    let meta = DenseWarpMeta {
        height: warp.height as u32,
        width: warp.width as u32,
        dtype: "f32".into(),
        planes: vec!["x".into(), "y".into()],
        coordinate_space: "normalized [-1,1], corners at (-1,-1) and (1,1)".into(),
    };
    let sidecar = path.with_extension(format!(
        "{}json",
        path.extension().map(|e| format!("{}.", e.to_string_lossy())).unwrap_or_default()
    ));
    std::fs::write(sidecar, serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Read a dense warp blob written by [`save_dense_warp`].
pub fn load_dense_warp(path: impl AsRef<Path>) -> Result<DenseWarp> {
    let mut file = std::fs::File::open(path.as_ref())?;
    let mut header = [0u8; 8];
    file.read_exact(&mut header)?;
    let height = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let count = height
        .checked_mul(width)
        .ok_or_else(|| Error::Format("dense warp header overflow".into()))?;
    let mut buf = vec![0u8; count * 4 * 2];
    file.read_exact(&mut buf)?;
    let mut planes = buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64);
    let x: Vec<f64> = planes.by_ref().take(count).collect();
    let y: Vec<f64> = planes.collect();
    DenseWarp::new(height, width, x, y)
}
