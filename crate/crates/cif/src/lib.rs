//! Desk-scale consistent-instance-field engine.
//!
//! A scene is represented by a set of instance-embedded 3D Gaussians: each
//! primitive carries geometry (mean, rotation, anisotropic scale), appearance
//! (color, opacity), and an instance layer (occupancy, a base identity
//! distribution over K instances, and a per-instance calibration log-factor
//! that corrects visibility bias). A small shared MLP deforms means,
//! rotations and scales over normalized time, so one canonical set explains a
//! dynamic sequence.
//!
//! The crate provides:
//!
//! - [`gaussians`]: the primitive set, calibrated identities, and volumetric
//!   field queries (occupancy / identity / joint response at a point in
//!   space-time);
//! - [`deform`]: the time-conditioned deformation MLP with an analytic
//!   backward pass;
//! - [`splat`]: differentiable EWA splatting of color and instance-marginal
//!   maps, with a brute-force reference compositor used as a test oracle;
//! - [`identity`]: visibility-weighted identity estimation from 2D masks;
//! - [`resample`]: instance-guided transfer of low-response Gaussians into
//!   high-response regions with volume-conserving opacity adjustment;
//! - [`train`]: losses, Adam, and the two-stage optimization loop;
//! - [`eval`]: panoptic maps and segmentation metrics;
//! - [`data`]: scene/image I/O, multi-view zigzag merging, visibility
//!   filtering, and synthetic scene generation;
//! - [`params`] / [`checkpoint`]: a flat, documented parameter packing and a
//!   binary checkpoint format built on it.
//!
//! Everything is `f64` and deterministic: a fixed seed and config reproduce
//! checkpoints bit-for-bit at any worker count.

pub mod camera;
pub mod checkpoint;
pub mod data;
pub mod deform;
pub mod error;
pub mod eval;
pub mod gaussians;
pub mod gradcheck;
pub mod identity;
pub mod params;
pub mod resample;
pub mod splat;
#[doc(hidden)]
pub mod testgen;
pub mod train;

pub use camera::Camera;
pub use error::{Error, Result};
pub use gaussians::{FieldSample, GaussianSet};

/// Compositing terms with `alpha * kernel` (or `occupancy * kernel`) below
/// this threshold are skipped on the corresponding path.
pub const SKIP_THRESHOLD: f64 = 1e-4;

/// Per-path early-exit threshold: once transmittance drops below this, the
/// path stops accumulating.
pub const TRANSMITTANCE_FLOOR: f64 = 1e-4;

/// Isotropic variance (in squared pixels) added to every projected 2D
/// covariance so splats never degenerate below roughly one pixel.
pub const SCREEN_DILATION: f64 = 0.3;

/// Near-plane depth: Gaussians at or behind this camera-space depth are
/// culled before rasterization.
pub const NEAR_PLANE: f64 = 0.01;

/// Clamp range floor for instance responses when building resampling
/// distributions.
pub const RESPONSE_EPS: f64 = 1e-4;

/// Floor applied inside the instance cross-entropy to keep logs finite.
pub const LOG_FLOOR: f64 = 1e-8;
