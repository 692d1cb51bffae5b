//! Silhouette-to-silhouette alignment via grid-based free-form deformation.
//!
//! The warp is an m×n grid of lookup coordinates parametrized by per-axis
//! increments (integrated with a cumulative sum), optionally rectified for
//! axial monotonicity, upsampled bilinearly to a dense field, and applied to
//! the source image by backward bilinear sampling. Two alignment routes are
//! provided on top of this differentiable chain:
//!
//! * [`pair_optimizer`] — direct ADAM optimization of the warp for a single
//!   source/target pair;
//! * [`regressor`] + [`trainer`] — a small convolutional network that regresses
//!   the warp from a stacked (source, partial target) image pair, trained
//!   self-supervised by occluding targets and scoring against the complete
//!   shape.
//!
//! [`evaluator`] adds inference, test-set metrics, robustness protocols and a
//! RANSAC affine baseline; [`synth`] generates procedural silhouette datasets
//! so everything can run without external data.

#![allow(clippy::needless_range_loop)]

pub mod error;
pub mod evaluator;
pub mod grids;
pub mod losses;
pub mod pair_optimizer;
pub mod parametrization;
pub mod regressor;
pub mod sampler;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
