//! Differential warp representation: cumulative-sum integration of per-axis
//! coordinate increments, its adjoint, the identity differential, and the
//! absolute-value layer that enforces axial monotonicity.
//!
//! A control warp stores absolute lookup coordinates on an m×n grid in the
//! normalized `[-1,1]²` space. It is produced by integrating a differential
//! warp: `x` is the running sum of `dx` left-to-right along each row starting
//! from `offset_x`, and `y` is the running sum of `dy` top-to-bottom along
//! each column starting from `offset_y`. Nonnegative increments therefore
//! yield coordinates that are non-decreasing along their axis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ablation switch for the warp parametrization and regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegularizationMode {
    /// No regularization term, raw increments integrated as-is.
    None,
    /// TV-identity penalty on the raw increments.
    Tv,
    /// Absolute-value layer on the increments (axial monotonicity) plus the
    /// TV-identity penalty on the rectified increments.
    TvMonotonic,
}

impl RegularizationMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "tv" => Ok(Self::Tv),
            "tvm" | "tv&m" | "tv_monotonic" => Ok(Self::TvMonotonic),
            other => Err(Error::validation(format!(
                "unknown regularization mode '{other}' (expected none, tv, tvm)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Tv => "tv",
            Self::TvMonotonic => "tvm",
        }
    }
}

/// Per-axis coordinate increments of an m×n control grid plus the scalar
/// integration offsets. `dx` holds horizontal increments, `dy` vertical ones,
/// both row-major.
///
/// The same struct doubles as the gradient container for quantities of this
/// shape (backward passes return one).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifferentialWarp {
    pub m: usize,
    pub n: usize,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
    pub offset_x: f64,
    pub offset_y: f64,
}

impl DifferentialWarp {
    pub fn new(m: usize, n: usize, dx: Vec<f64>, dy: Vec<f64>, offset_x: f64, offset_y: f64) -> Result<Self> {
        if m < 2 || n < 2 {
            return Err(Error::validation(format!(
                "differential warp grid must be at least 2x2, got {m}x{n}"
            )));
        }
        if dx.len() != m * n || dy.len() != m * n {
            return Err(Error::validation("dx/dy length must equal m*n"));
        }
        if dx.iter().chain(dy.iter()).any(|v| !v.is_finite())
            || !offset_x.is_finite()
            || !offset_y.is_finite()
        {
            return Err(Error::validation("differential warp contains non-finite values"));
        }
        Ok(Self {
            m,
            n,
            dx,
            dy,
            offset_x,
            offset_y,
        })
    }

    pub fn zeros(m: usize, n: usize) -> Self {
        Self {
            m,
            n,
            dx: vec![0.0; m * n],
            dy: vec![0.0; m * n],
            offset_x: 0.0,
            offset_y: 0.0,
        }
    }

    #[inline]
    pub fn idx(&self, r: usize, c: usize) -> usize {
        r * self.n + c
    }
}

/// Absolute lookup coordinates of the m×n control grid in normalized space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlWarp {
    pub m: usize,
    pub n: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl ControlWarp {
    pub fn new(m: usize, n: usize, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if m < 2 || n < 2 {
            return Err(Error::validation("control warp grid must be at least 2x2"));
        }
        if x.len() != m * n || y.len() != m * n {
            return Err(Error::validation("x/y length must equal m*n"));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::validation("control warp contains non-finite values"));
        }
        Ok(Self { m, n, x, y })
    }

    #[inline]
    pub fn idx(&self, r: usize, c: usize) -> usize {
        r * self.n + c
    }

    /// True when x is non-decreasing along every row and y along every column.
    pub fn is_axially_monotonic(&self) -> bool {
        for r in 0..self.m {
            for c in 0..self.n - 1 {
                if self.x[self.idx(r, c)] > self.x[self.idx(r, c + 1)] {
                    return false;
                }
            }
        }
        for c in 0..self.n {
            for r in 0..self.m - 1 {
                if self.y[self.idx(r, c)] > self.y[self.idx(r + 1, c)] {
                    return false;
                }
            }
        }
        true
    }

    /// Maximum absolute componentwise difference against another grid.
    pub fn max_abs_diff(&self, other: &ControlWarp) -> f64 {
        self.x
            .iter()
            .zip(&other.x)
            .chain(self.y.iter().zip(&other.y))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Uniform identity spacing along an axis with `n` samples.
#[inline]
pub fn identity_spacing(n: usize) -> f64 {
    2.0 / (n as f64 - 1.0)
}

/// Running sum: `out[k] = a0 + delta[0] + ... + delta[k]`.
pub fn cumsum_1d(delta: &[f64], a0: f64) -> Result<Vec<f64>> {
    if delta.is_empty() {
        return Err(Error::validation("cumsum of empty sequence"));
    }
    let mut out = Vec::with_capacity(delta.len());
    let mut acc = a0;
    for d in delta {
        acc += d;
        out.push(acc);
    }
    Ok(out)
}

/// Adjoint of [`cumsum_1d`]: suffix sums of the output gradient, plus the
/// gradient of the offset (sum of all entries).
pub fn cumsum_1d_adjoint(grad_out: &[f64]) -> Result<(Vec<f64>, f64)> {
    if grad_out.is_empty() {
        return Err(Error::validation("adjoint of empty sequence"));
    }
    let mut grad_delta = vec![0.0; grad_out.len()];
    let mut acc = 0.0;
    for k in (0..grad_out.len()).rev() {
        acc += grad_out[k];
        grad_delta[k] = acc;
    }
    Ok((grad_delta, acc))
}

/// Differential warp whose integration yields the regular grid spanning
/// `[-1,1]²`: constant column spacing `2/(n-1)`, row spacing `2/(m-1)`, and
/// offsets `-1 - spacing` so the first integrated sample lands exactly on -1.
pub fn identity_differential(m: usize, n: usize) -> Result<DifferentialWarp> {
    if m < 2 || n < 2 {
        return Err(Error::validation(format!(
            "identity grid needs m,n >= 2, got {m}x{n}"
        )));
    }
    let dc = identity_spacing(n);
    let dr = identity_spacing(m);
    DifferentialWarp::new(
        m,
        n,
        vec![dc; m * n],
        vec![dr; m * n],
        -1.0 - dc,
        -1.0 - dr,
    )
}

/// Replace the increments by their absolute values, leaving offsets intact.
pub fn enforce_monotonic(raw: &DifferentialWarp) -> DifferentialWarp {
    DifferentialWarp {
        m: raw.m,
        n: raw.n,
        dx: raw.dx.iter().map(|v| v.abs()).collect(),
        dy: raw.dy.iter().map(|v| v.abs()).collect(),
        offset_x: raw.offset_x,
        offset_y: raw.offset_y,
    }
}

/// Adjoint of [`enforce_monotonic`]: multiplies incoming increment gradients
/// by the sign of the raw input (subgradient 0 at exactly 0). Offset
/// gradients pass through unchanged.
pub fn enforce_monotonic_adjoint(raw: &DifferentialWarp, grad: &DifferentialWarp) -> DifferentialWarp {
    let sig = |v: f64| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    DifferentialWarp {
        m: raw.m,
        n: raw.n,
        dx: raw.dx.iter().zip(&grad.dx).map(|(r, g)| sig(*r) * g).collect(),
        dy: raw.dy.iter().zip(&grad.dy).map(|(r, g)| sig(*r) * g).collect(),
        offset_x: grad.offset_x,
        offset_y: grad.offset_y,
    }
}

/// Integrate a differential warp into absolute control coordinates: rows of
/// `dx` are cumulative-summed left-to-right from `offset_x`, columns of `dy`
/// top-to-bottom from `offset_y`.
pub fn integrate(delta: &DifferentialWarp) -> ControlWarp {
    let (m, n) = (delta.m, delta.n);
    let mut x = vec![0.0; m * n];
    let mut y = vec![0.0; m * n];
    for r in 0..m {
        let mut acc = delta.offset_x;
        for c in 0..n {
            acc += delta.dx[r * n + c];
            x[r * n + c] = acc;
        }
    }
    for c in 0..n {
        let mut acc = delta.offset_y;
        for r in 0..m {
            acc += delta.dy[r * n + c];
            y[r * n + c] = acc;
        }
    }
    ControlWarp { m, n, x, y }
}

/// Adjoint of [`integrate`]: suffix sums along the integration axes, with
/// offset gradients collecting the total mass of each plane.
pub fn integrate_adjoint(m: usize, n: usize, grad_x: &[f64], grad_y: &[f64]) -> DifferentialWarp {
    let mut dx = vec![0.0; m * n];
    let mut dy = vec![0.0; m * n];
    let mut offset_x = 0.0;
    let mut offset_y = 0.0;
    for r in 0..m {
        let mut acc = 0.0;
        for c in (0..n).rev() {
            acc += grad_x[r * n + c];
            dx[r * n + c] = acc;
        }
        offset_x += acc;
    }
    for c in 0..n {
        let mut acc = 0.0;
        for r in (0..m).rev() {
            acc += grad_y[r * n + c];
            dy[r * n + c] = acc;
        }
        offset_y += acc;
    }
    DifferentialWarp {
        m,
        n,
        dx,
        dy,
        offset_x,
        offset_y,
    }
}

/// The increments whose integration actually produced the warp: rectified in
/// monotonic mode, raw otherwise.
pub fn effective_differential(raw: &DifferentialWarp, mode: RegularizationMode) -> DifferentialWarp {
    match mode {
        RegularizationMode::TvMonotonic => enforce_monotonic(raw),
        _ => raw.clone(),
    }
}

/// Turn raw increments into an absolute control warp under the given mode.
pub fn build_control_warp(raw: &DifferentialWarp, mode: RegularizationMode) -> ControlWarp {
    integrate(&effective_differential(raw, mode))
}

/// Adjoint of [`build_control_warp`], chaining the integrator adjoint with
/// the absolute-value adjoint when the mode rectifies.
pub fn build_control_warp_adjoint(
    raw: &DifferentialWarp,
    mode: RegularizationMode,
    grad_x: &[f64],
    grad_y: &[f64],
) -> DifferentialWarp {
    let grad = integrate_adjoint(raw.m, raw.n, grad_x, grad_y);
    match mode {
        RegularizationMode::TvMonotonic => enforce_monotonic_adjoint(raw, &grad),
        _ => grad,
    }
}
