//! Alignment loss terms: the pixelwise squared shape loss, the anisotropic
//! TV-identity penalty on warp increments, and their weighted combination.
//!
//! Losses are sums (not means) over pixels and grid entries; the default
//! regularization weight assumes this convention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::Silhouette;
use crate::parametrization::{
    enforce_monotonic, enforce_monotonic_adjoint, identity_spacing, DifferentialWarp,
    RegularizationMode,
};

/// One evaluation of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub shape_loss: f64,
    pub reg_loss: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossReport {
    pub fn new(shape_loss: f64, reg_loss: f64, lambda: f64) -> Self {
        Self {
            shape_loss,
            reg_loss,
            total: shape_loss + lambda * reg_loss,
            lambda,
        }
    }
}

/// Sum over pixels of half the squared difference between the target and the
/// estimate, with the gradient taken with respect to the estimate.
pub fn shape_loss(estimated: &Silhouette, target: &Silhouette) -> Result<(f64, Vec<f64>)> {
    if estimated.height() != target.height() || estimated.width() != target.width() {
        return Err(Error::validation(format!(
            "shape loss dimension mismatch: {}x{} vs {}x{}",
            estimated.height(),
            estimated.width(),
            target.height(),
            target.width()
        )));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; estimated.values().len()];
    for (i, (e, t)) in estimated.values().iter().zip(target.values()).enumerate() {
        let diff = t - e;
        loss += 0.5 * diff * diff;
        grad[i] = e - t;
    }
    Ok((loss, grad))
}

#[inline]
fn l1_sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// L1 deviation of the increments from the uniform identity spacing, summed
/// over both planes, with the entrywise sign subgradient.
pub fn tv_identity_loss(delta: &DifferentialWarp) -> (f64, DifferentialWarp) {
    let dc = identity_spacing(delta.n);
    let dr = identity_spacing(delta.m);
    let mut loss = 0.0;
    let mut grad = DifferentialWarp::zeros(delta.m, delta.n);
    for (i, v) in delta.dx.iter().enumerate() {
        let d = v - dc;
        loss += d.abs();
        grad.dx[i] = l1_sign(d);
    }
    for (i, v) in delta.dy.iter().enumerate() {
        let d = v - dr;
        loss += d.abs();
        grad.dy[i] = l1_sign(d);
    }
    (loss, grad)
}

/// Combined objective `shape + lambda * reg` with gradients for both inputs.
///
/// The regularizer taps the raw increments in `Tv` mode and the rectified
/// increments in `TvMonotonic` mode (chaining the absolute-value adjoint back
/// to the raw values); in `None` mode it is absent entirely. The returned
/// gradients are of the total: the image gradient is with respect to the
/// estimate, the warp gradient with respect to the raw differential.
pub fn combined_loss(
    estimated: &Silhouette,
    target: &Silhouette,
    raw_delta: &DifferentialWarp,
    lambda: f64,
    mode: RegularizationMode,
) -> Result<(LossReport, Vec<f64>, DifferentialWarp)> {
    if lambda < 0.0 {
        return Err(Error::validation("lambda must be nonnegative"));
    }
    let (shape, grad_estimated) = shape_loss(estimated, target)?;
    let (reg, mut grad_delta) = match mode {
        RegularizationMode::None => (0.0, DifferentialWarp::zeros(raw_delta.m, raw_delta.n)),
        RegularizationMode::Tv => tv_identity_loss(raw_delta),
        RegularizationMode::TvMonotonic => {
            let rectified = enforce_monotonic(raw_delta);
            let (reg, grad_rect) = tv_identity_loss(&rectified);
            (reg, enforce_monotonic_adjoint(raw_delta, &grad_rect))
        }
    };
    for v in grad_delta.dx.iter_mut().chain(grad_delta.dy.iter_mut()) {
        *v *= lambda;
    }
    grad_delta.offset_x = 0.0;
    grad_delta.offset_y = 0.0;
    Ok((LossReport::new(shape, reg, lambda), grad_estimated, grad_delta))
}
