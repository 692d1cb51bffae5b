//! Convolutional warp regressor: maps a stacked (source, partial target)
//! image pair to a raw differential warp. Forward and reverse passes are
//! written out directly so gradients are exact and bit-deterministic.
//!
//! The network is four blocks of [max-pool 2×2 stride 2 → convolution →
//! rectifier] followed by two fully-connected layers. Convolutions keep the
//! spatial size (zero padding, split top/left = floor((k-1)/2) with the
//! remainder on bottom/right), so each block halves the resolution and the
//! flattened size after block 4 is `channels * (resolution/16)²`:
//!
//! | stage  | kernel | channels | output (at 64×64) |
//! |--------|--------|----------|-------------------|
//! | conv1  | 5×5    | 2 → 20   | 20×32×32          |
//! | conv2  | 5×5    | 20 → 20  | 20×16×16          |
//! | conv3  | 2×2    | 20 → 20  | 20×8×8            |
//! | conv4  | 4×4    | 20 → 20  | 20×4×4            |
//! | fc1    |        | 320 → 20 |                   |
//! | fc2    |        | 20 → 2mn |                   |
//!
//! The last layer starts at the identity: fc2 weights are zero and its bias
//! holds the identity differential, so an untrained network emits exactly
//! the identity warp for any input.

use std::io::{Read, Write as _};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::Silhouette;
use crate::parametrization::{identity_spacing, DifferentialWarp};

pub const CONV_CHANNELS: usize = 20;
pub const FC1_UNITS: usize = 20;

/// Dense channels×height×width activation block.
#[derive(Debug, Clone)]
pub struct Tensor3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    fn plane(&self, c: usize) -> &[f64] {
        let s = c * self.height * self.width;
        &self.data[s..s + self.height * self.width]
    }
}

/// Stride-1 convolution with zero padding preserving the spatial size.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Conv2d {
    fn new(cin: usize, cout: usize, k: usize) -> Self {
        Self {
            cin,
            cout,
            k,
            pad_top: (k - 1) / 2,
            pad_left: (k - 1) / 2,
            w: vec![0.0; cout * cin * k * k],
            b: vec![0.0; cout],
        }
    }

    #[inline]
    fn widx(&self, co: usize, ci: usize, ky: usize, kx: usize) -> usize {
        ((co * self.cin + ci) * self.k + ky) * self.k + kx
    }

    pub fn forward(&self, input: &Tensor3) -> Tensor3 {
        let (h, w) = (input.height, input.width);
        let mut out = Tensor3::zeros(self.cout, h, w);
        for co in 0..self.cout {
            let plane = &mut out.data[co * h * w..(co + 1) * h * w];
            plane.fill(self.b[co]);
            for ci in 0..self.cin {
                let inp = input.plane(ci);
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        let wgt = self.w[self.widx(co, ci, ky, kx)];
                        if wgt == 0.0 {
                            continue;
                        }
                        let oy_lo = self.pad_top.saturating_sub(ky);
                        let oy_hi = (h as isize + self.pad_top as isize - ky as isize)
                            .clamp(0, h as isize) as usize;
                        let ox_lo = self.pad_left.saturating_sub(kx);
                        let ox_hi = (w as isize + self.pad_left as isize - kx as isize)
                            .clamp(0, w as isize) as usize;
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - self.pad_top;
                            let in_row = &inp[iy * w..(iy + 1) * w];
                            let out_row = &mut plane[oy * w..(oy + 1) * w];
                            for ox in ox_lo..ox_hi {
                                out_row[ox] += wgt * in_row[ox + kx - self.pad_left];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Gradients with respect to weights, biases and the layer input.
    pub fn backward(&self, input: &Tensor3, grad_out: &Tensor3) -> (Vec<f64>, Vec<f64>, Tensor3) {
        let (h, w) = (input.height, input.width);
        let mut gw = vec![0.0; self.w.len()];
        let mut gb = vec![0.0; self.cout];
        let mut gin = Tensor3::zeros(self.cin, h, w);
        for co in 0..self.cout {
            let gplane = grad_out.plane(co);
            gb[co] += gplane.iter().sum::<f64>();
            for ci in 0..self.cin {
                let inp = input.plane(ci);
                let gin_plane = &mut gin.data[ci * h * w..(ci + 1) * h * w];
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        let oy_lo = self.pad_top.saturating_sub(ky);
                        let oy_hi = (h as isize + self.pad_top as isize - ky as isize)
                            .clamp(0, h as isize) as usize;
                        let ox_lo = self.pad_left.saturating_sub(kx);
                        let ox_hi = (w as isize + self.pad_left as isize - kx as isize)
                            .clamp(0, w as isize) as usize;
                        let wgt = self.w[self.widx(co, ci, ky, kx)];
                        let mut gw_acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - self.pad_top;
                            let g_row = &gplane[oy * w..(oy + 1) * w];
                            let in_row = &inp[iy * w..(iy + 1) * w];
                            let gin_row = &mut gin_plane[iy * w..(iy + 1) * w];
                            for ox in ox_lo..ox_hi {
                                let ix = ox + kx - self.pad_left;
                                gw_acc += g_row[ox] * in_row[ix];
                                gin_row[ix] += wgt * g_row[ox];
                            }
                        }
                        gw[self.widx(co, ci, ky, kx)] += gw_acc;
                    }
                }
            }
        }
        (gw, gb, gin)
    }
}

/// Fully-connected layer, weights stored row-major `[out][in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub n_in: usize,
    pub n_out: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Linear {
    fn new(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            w: vec![0.0; n_in * n_out],
            b: vec![0.0; n_out],
        }
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut out = self.b.clone();
        for o in 0..self.n_out {
            let row = &self.w[o * self.n_in..(o + 1) * self.n_in];
            out[o] += row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
        }
        out
    }

    pub fn backward(&self, input: &[f64], grad_out: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut gw = vec![0.0; self.w.len()];
        let mut gin = vec![0.0; self.n_in];
        for o in 0..self.n_out {
            let g = grad_out[o];
            let row = &self.w[o * self.n_in..(o + 1) * self.n_in];
            let grow = &mut gw[o * self.n_in..(o + 1) * self.n_in];
            for i in 0..self.n_in {
                grow[i] = g * input[i];
                gin[i] += g * row[i];
            }
        }
        (gw, grad_out.to_vec(), gin)
    }
}

/// 2×2 stride-2 max pooling; ties break to the first index in scan order so
/// the gradient routing is deterministic.
fn maxpool(input: &Tensor3) -> (Tensor3, Vec<usize>) {
    let (c, h, w) = (input.channels, input.height, input.width);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor3::zeros(c, oh, ow);
    let mut argmax = vec![0usize; c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = (ci * h + oy * 2 + dy) * w + ox * 2 + dx;
                        if input.data[idx] > best {
                            best = input.data[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (ci * oh + oy) * ow + ox;
                out.data[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    (out, argmax)
}

fn maxpool_backward(
    input_shape: (usize, usize, usize),
    argmax: &[usize],
    grad_out: &Tensor3,
) -> Tensor3 {
    let mut gin = Tensor3::zeros(input_shape.0, input_shape.1, input_shape.2);
    for (o, idx) in argmax.iter().enumerate() {
        gin.data[*idx] += grad_out.data[o];
    }
    gin
}

fn relu(input: &Tensor3) -> Tensor3 {
    Tensor3 {
        channels: input.channels,
        height: input.height,
        width: input.width,
        data: input.data.iter().map(|v| v.max(0.0)).collect(),
    }
}

fn relu_backward(pre_act: &Tensor3, grad_out: &Tensor3) -> Tensor3 {
    Tensor3 {
        channels: pre_act.channels,
        height: pre_act.height,
        width: pre_act.width,
        data: pre_act
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
            .collect(),
    }
}

/// All trainable parameters of the regressor.
#[derive(Debug, Clone)]
pub struct RegressorParams {
    pub resolution: usize,
    pub m: usize,
    pub n: usize,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub conv3: Conv2d,
    pub conv4: Conv2d,
    pub fc1: Linear,
    pub fc2: Linear,
    /// Learned integration offsets, x then y.
    pub w0: [f64; 2],
}

fn glorot(rng: &mut impl Rng, buf: &mut [f64], fan_in: usize, fan_out: usize) {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in buf.iter_mut() {
        *v = rng.gen_range(-bound..bound);
    }
}

impl RegressorParams {
    fn empty(resolution: usize, m: usize, n: usize) -> Result<Self> {
        if resolution < 16 || resolution % 16 != 0 {
            return Err(Error::validation(format!(
                "resolution must be a positive multiple of 16, got {resolution}"
            )));
        }
        if m < 2 || n < 2 {
            return Err(Error::validation("grid dimensions must be at least 2"));
        }
        let flat = CONV_CHANNELS * (resolution / 16) * (resolution / 16);
        Ok(Self {
            resolution,
            m,
            n,
            conv1: Conv2d::new(2, CONV_CHANNELS, 5),
            conv2: Conv2d::new(CONV_CHANNELS, CONV_CHANNELS, 5),
            conv3: Conv2d::new(CONV_CHANNELS, CONV_CHANNELS, 2),
            conv4: Conv2d::new(CONV_CHANNELS, CONV_CHANNELS, 4),
            fc1: Linear::new(flat, FC1_UNITS),
            fc2: Linear::new(FC1_UNITS, 2 * m * n),
            w0: [0.0; 2],
        })
    }

    /// Zero-filled clone of the same shape, used for gradients and moments.
    pub fn zeros_like(&self) -> Self {
        let mut p = self.clone();
        for seg in p.segments_mut() {
            seg.fill(0.0);
        }
        p
    }

    /// Parameter slices in the fixed serialization order: conv1..conv4
    /// (weights then bias each), fc1, fc2, then the two offsets.
    pub fn segments(&self) -> Vec<&[f64]> {
        vec![
            &self.conv1.w,
            &self.conv1.b,
            &self.conv2.w,
            &self.conv2.b,
            &self.conv3.w,
            &self.conv3.b,
            &self.conv4.w,
            &self.conv4.b,
            &self.fc1.w,
            &self.fc1.b,
            &self.fc2.w,
            &self.fc2.b,
            &self.w0,
        ]
    }

    pub fn segments_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            &mut self.conv1.w,
            &mut self.conv1.b,
            &mut self.conv2.w,
            &mut self.conv2.b,
            &mut self.conv3.w,
            &mut self.conv3.b,
            &mut self.conv4.w,
            &mut self.conv4.b,
            &mut self.fc1.w,
            &mut self.fc1.b,
            &mut self.fc2.w,
            &mut self.fc2.b,
            &mut self.w0,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.segments().iter().map(|s| s.len()).sum()
    }

    /// Accumulate another same-shaped parameter set (used to sum per-sample
    /// gradients in a fixed order).
    pub fn add_assign(&mut self, other: &RegressorParams) {
        for (a, b) in self.segments_mut().into_iter().zip(other.segments()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// Intermediate activations retained for the reverse pass.
pub struct ForwardCache {
    pooled: [Tensor3; 4],
    pre_act: [Tensor3; 4],
    argmax: [Vec<usize>; 4],
    pre_pool_shapes: [(usize, usize, usize); 4],
    flat: Vec<f64>,
    fc1_pre: Vec<f64>,
    fc1_post: Vec<f64>,
}

/// Random conv/fc1 weights, identity-valued fc2 bias, zero fc2 weights, and
/// offsets matching the identity integration convention, so a fresh network
/// outputs exactly the identity warp.
pub fn init_params(
    rng: &mut impl Rng,
    m: usize,
    n: usize,
    resolution: usize,
) -> Result<RegressorParams> {
    let mut p = RegressorParams::empty(resolution, m, n)?;
    for conv in [&mut p.conv1, &mut p.conv2, &mut p.conv3, &mut p.conv4] {
        let fan_in = conv.cin * conv.k * conv.k;
        let fan_out = conv.cout * conv.k * conv.k;
        let mut w = std::mem::take(&mut conv.w);
        glorot(rng, &mut w, fan_in, fan_out);
        conv.w = w;
    }
    let mut w = std::mem::take(&mut p.fc1.w);
    glorot(rng, &mut w, p.fc1.n_in, p.fc1.n_out);
    p.fc1.w = w;

    // fc2: zero weights kill input dependence; biases carry the identity
    // differential (dx block then dy block).
    let dc = identity_spacing(n);
    let dr = identity_spacing(m);
    for i in 0..m * n {
        p.fc2.b[i] = dc;
        p.fc2.b[m * n + i] = dr;
    }
    p.w0 = [-1.0 - dc, -1.0 - dr];
    Ok(p)
}

fn stack_inputs(source: &Silhouette, partial_target: &Silhouette) -> Tensor3 {
    let (h, w) = (source.height(), source.width());
    let mut t = Tensor3::zeros(2, h, w);
    t.data[..h * w].copy_from_slice(source.values());
    t.data[h * w..].copy_from_slice(partial_target.values());
    t
}

/// Run the network on a stacked (source, partial target) pair, returning the
/// raw differential warp and the cache for [`backward`].
pub fn forward(
    params: &RegressorParams,
    source: &Silhouette,
    partial_target: &Silhouette,
) -> Result<(DifferentialWarp, ForwardCache)> {
    for img in [source, partial_target] {
        if img.height() != params.resolution || img.width() != params.resolution {
            return Err(Error::validation(format!(
                "input {}x{} does not match network resolution {}",
                img.height(),
                img.width(),
                params.resolution
            )));
        }
    }
    let x0 = stack_inputs(source, partial_target);
    let convs = [&params.conv1, &params.conv2, &params.conv3, &params.conv4];

    let mut pooled: Vec<Tensor3> = Vec::with_capacity(4);
    let mut pre_act: Vec<Tensor3> = Vec::with_capacity(4);
    let mut argmax: Vec<Vec<usize>> = Vec::with_capacity(4);
    let mut shapes: Vec<(usize, usize, usize)> = Vec::with_capacity(4);

    let mut cur = x0;
    for conv in convs {
        shapes.push((cur.channels, cur.height, cur.width));
        let (p, am) = maxpool(&cur);
        let c = conv.forward(&p);
        let a = relu(&c);
        pooled.push(p);
        pre_act.push(c);
        argmax.push(am);
        cur = a;
    }

    let flat = cur.data.clone();
    let fc1_pre = params.fc1.forward(&flat);
    let fc1_post: Vec<f64> = fc1_pre.iter().map(|v| v.max(0.0)).collect();
    let out = params.fc2.forward(&fc1_post);

    let mn = params.m * params.n;
    let raw = DifferentialWarp {
        m: params.m,
        n: params.n,
        dx: out[..mn].to_vec(),
        dy: out[mn..].to_vec(),
        offset_x: params.w0[0],
        offset_y: params.w0[1],
    };
    let cache = ForwardCache {
        pooled: pooled.try_into().map_err(|_| Error::validation("cache"))?,
        pre_act: pre_act.try_into().map_err(|_| Error::validation("cache"))?,
        argmax: argmax.try_into().map_err(|_| Error::validation("cache"))?,
        pre_pool_shapes: shapes.try_into().map_err(|_| Error::validation("cache"))?,
        flat,
        fc1_pre,
        fc1_post,
    };
    Ok((raw, cache))
}

/// Exact reverse-mode gradients for every parameter given the gradient of
/// the loss with respect to the raw differential warp.
pub fn backward(
    params: &RegressorParams,
    cache: &ForwardCache,
    grad_raw: &DifferentialWarp,
) -> RegressorParams {
    let mut grads = params.zeros_like();
    let mn = params.m * params.n;
    let mut g_out = Vec::with_capacity(2 * mn);
    g_out.extend_from_slice(&grad_raw.dx);
    g_out.extend_from_slice(&grad_raw.dy);

    let (gw2, gb2, g_fc1_post) = params.fc2.backward(&cache.fc1_post, &g_out);
    grads.fc2.w = gw2;
    grads.fc2.b = gb2;

    let g_fc1_pre: Vec<f64> = cache
        .fc1_pre
        .iter()
        .zip(&g_fc1_post)
        .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
        .collect();
    let (gw1, gb1, g_flat) = params.fc1.backward(&cache.flat, &g_fc1_pre);
    grads.fc1.w = gw1;
    grads.fc1.b = gb1;

    let last = &cache.pre_act[3];
    let mut g_act = Tensor3 {
        channels: last.channels,
        height: last.height,
        width: last.width,
        data: g_flat,
    };

    let convs = [&params.conv1, &params.conv2, &params.conv3, &params.conv4];
    for i in (0..4).rev() {
        let g_pre = relu_backward(&cache.pre_act[i], &g_act);
        let (gw, gb, g_pool) = convs[i].backward(&cache.pooled[i], &g_pre);
        let slot = match i {
            0 => &mut grads.conv1,
            1 => &mut grads.conv2,
            2 => &mut grads.conv3,
            _ => &mut grads.conv4,
        };
        slot.w = gw;
        slot.b = gb;
        if i == 0 {
            break;
        }
        g_act = maxpool_backward(cache.pre_pool_shapes[i], &cache.argmax[i], &g_pool);
    }

    grads.w0 = [grad_raw.offset_x, grad_raw.offset_y];
    grads
}

/// ADAM moment accumulators mirroring the parameter layout.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: RegressorParams,
    pub v: RegressorParams,
    pub step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &RegressorParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected ADAM update over every parameter (offsets included).
pub fn adam_step(
    params: &mut RegressorParams,
    grads: &RegressorParams,
    state: &mut AdamState,
    learning_rate: f64,
) {
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let mut p_segs = params.segments_mut();
    let mut m_segs = state.m.segments_mut();
    let mut v_segs = state.v.segments_mut();
    let g_segs = grads.segments();
    for s in 0..p_segs.len() {
        let p = &mut p_segs[s];
        let m = &mut m_segs[s];
        let v = &mut v_segs[s];
        let g = g_segs[s];
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= learning_rate * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

const CHECKPOINT_MAGIC: &[u8] = b"SWARP-CKPT-v1\n";

/// JSON header stored in every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub resolution: usize,
    pub m: usize,
    pub n: usize,
    pub step: usize,
    pub dtype: String,
    pub param_count: usize,
    pub has_adam: bool,
    pub mode: String,
    /// Echo of the training configuration that produced the checkpoint.
    pub config: serde_json::Value,
}

/// Serialize parameters (and optionally optimizer state) as a versioned
/// magic string, a length-prefixed JSON header, and little-endian parameter
/// blobs in segment order. Parameters are stored as f64 so a save/load
/// round-trip reproduces forward passes bitwise; f32 blobs are accepted on
/// read.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &RegressorParams,
    adam: Option<&AdamState>,
    step: usize,
    mode: &str,
    config: serde_json::Value,
) -> Result<()> {
    let meta = CheckpointMeta {
        resolution: params.resolution,
        m: params.m,
        n: params.n,
        step,
        dtype: "f64".into(),
        param_count: params.param_count(),
        has_adam: adam.is_some(),
        mode: mode.into(),
        config,
    };
    let header = serde_json::to_vec(&meta)?;
    let mut buf = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 4 + header.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    let write_params = |p: &RegressorParams, buf: &mut Vec<u8>| {
        for seg in p.segments() {
            for v in seg {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    };
    write_params(params, &mut buf);
    if let Some(state) = adam {
        write_params(&state.m, &mut buf);
        write_params(&state.v, &mut buf);
        buf.extend_from_slice(&(state.step as u64).to_le_bytes());
    }
    // Atomic write: temp file in the same directory, then rename.
    let path = path.as_ref();
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_params_blob(
    reader: &mut impl Read,
    template: &RegressorParams,
    dtype: &str,
) -> Result<RegressorParams> {
    let mut p = template.zeros_like();
    let width = match dtype {
        "f64" => 8,
        "f32" => 4,
        other => return Err(Error::Format(format!("unsupported checkpoint dtype {other}"))),
    };
    let count = p.param_count();
    let mut raw = vec![0u8; count * width];
    reader.read_exact(&mut raw)?;
    let mut values = raw.chunks_exact(width).map(|b| {
        if width == 8 {
            f64::from_le_bytes(b.try_into().unwrap())
        } else {
            f32::from_le_bytes(b.try_into().unwrap()) as f64
        }
    });
    for seg in p.segments_mut() {
        for v in seg.iter_mut() {
            *v = values.next().unwrap();
        }
    }
    Ok(p)
}

/// Load a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(
    path: impl AsRef<Path>,
) -> Result<(RegressorParams, Option<AdamState>, CheckpointMeta)> {
    let mut file = std::fs::File::open(path.as_ref())?;
    let mut magic = vec![0u8; CHECKPOINT_MAGIC.len()];
    file.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header = vec![0u8; header_len];
    file.read_exact(&mut header)?;
    let meta: CheckpointMeta = serde_json::from_slice(&header)?;
    let template = RegressorParams::empty(meta.resolution, meta.m, meta.n)?;
    if template.param_count() != meta.param_count {
        return Err(Error::Format(format!(
            "parameter count mismatch: header says {}, architecture has {}",
            meta.param_count,
            template.param_count()
        )));
    }
    let params = read_params_blob(&mut file, &template, &meta.dtype)?;
    let adam = if meta.has_adam {
        let m = read_params_blob(&mut file, &template, &meta.dtype)?;
        let v = read_params_blob(&mut file, &template, &meta.dtype)?;
        let mut step_bytes = [0u8; 8];
        file.read_exact(&mut step_bytes)?;
        Some(AdamState {
            m,
            v,
            step: u64::from_le_bytes(step_bytes) as usize,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        })
    } else {
        None
    };
    Ok((params, adam, meta))
}
