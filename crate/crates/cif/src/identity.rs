//! Instance identity estimation: aggregates per-pixel rendering weights
//! against labeled masks into per-Gaussian base identity distributions.
//!
//! Each rendered pixel carries a normalized contribution list `(i, w)`;
//! the mask label routes that weight into the Gaussian's per-instance
//! numerator (labels `1..=K`) or its background mass (label 0). Normalizing
//! the numerators yields the base identity `p_hat`; Gaussians that never
//! receive instance-labeled mass fall back to the uniform distribution.
//! Background mass is kept for diagnostics only — identity is conditional
//! on existence, so label-0 evidence must not dilute `p_hat`.

use rayon::prelude::*;

use crate::camera::Camera;
use crate::deform::DeformationField;
use crate::error::{Error, Result};
use crate::gaussians::GaussianSet;
use crate::splat::{render, RenderBuffers, RenderOptions};

/// A labeled training frame: the camera it was observed from, its time, and
/// the per-pixel instance labels (`0` = background).
#[derive(Debug, Clone, Copy)]
pub struct MaskFrame<'a> {
    pub camera: &'a Camera,
    pub time: f64,
    pub labels: &'a [u16],
}

/// Per-Gaussian evidence accumulated over frames.
///
/// Invariant: `sum_k counts[i][k] + background[i] = total[i]` for every `i`.
#[derive(Debug, Clone)]
pub struct IdentityAccumulator {
    gaussians: usize,
    instances: usize,
    /// Weight mass received under each instance label, `N * K` row-major.
    counts: Vec<f64>,
    /// Weight mass received under the background label.
    background: Vec<f64>,
    /// Total weight mass (the visibility support `d_i`).
    total: Vec<f64>,
}

impl IdentityAccumulator {
    pub fn new(gaussians: usize, instances: usize) -> Self {
        IdentityAccumulator {
            gaussians,
            instances,
            counts: vec![0.0; gaussians * instances],
            background: vec![0.0; gaussians],
            total: vec![0.0; gaussians],
        }
    }

    pub fn gaussians(&self) -> usize {
        self.gaussians
    }

    pub fn instances(&self) -> usize {
        self.instances
    }

    /// Instance-labeled mass for Gaussian `i` under label `k` (1-based).
    pub fn count(&self, i: usize, k: usize) -> f64 {
        self.counts[i * self.instances + (k - 1)]
    }

    /// Background-labeled mass for Gaussian `i`.
    pub fn background_mass(&self, i: usize) -> f64 {
        self.background[i]
    }

    /// Total mass `d_i` (the Gaussian's visibility support).
    pub fn support(&self, i: usize) -> f64 {
        self.total[i]
    }

    /// Folds one rendered frame's contribution lists against its mask.
    pub fn accumulate(&mut self, buffers: &RenderBuffers, labels: &[u16]) -> Result<()> {
        let contributions = buffers.contributions.as_ref().ok_or_else(|| {
            Error::Usage("identity accumulation requires buffers rendered with contribution lists".into())
        })?;
        if labels.len() != buffers.pixel_count() {
            return Err(Error::ShapeMismatch(format!(
                "mask has {} pixels, buffers have {}",
                labels.len(),
                buffers.pixel_count()
            )));
        }
        let k = self.instances;
        for (list, &label) in contributions.iter().zip(labels) {
            if usize::from(label) > k {
                return Err(Error::LabelOverflow { label: u32::from(label), declared: k as u32 });
            }
            for &(gaussian, w) in list {
                let i = gaussian as usize;
                if label >= 1 {
                    self.counts[i * k + usize::from(label) - 1] += w;
                } else {
                    self.background[i] += w;
                }
                self.total[i] += w;
            }
        }
        Ok(())
    }

    /// Adds another accumulator's evidence (used for frame-parallel runs;
    /// partials are merged in frame order for reproducibility).
    pub fn merge(&mut self, other: &IdentityAccumulator) -> Result<()> {
        if other.gaussians != self.gaussians || other.instances != self.instances {
            return Err(Error::ShapeMismatch("accumulator shapes differ".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.background.iter_mut().zip(&other.background) {
            *a += b;
        }
        for (a, b) in self.total.iter_mut().zip(&other.total) {
            *a += b;
        }
        Ok(())
    }

    /// Normalized base identities, `N * K` row-major. Rows with no
    /// instance-labeled evidence are uniform.
    pub fn finalize(&self) -> Vec<f64> {
        let k = self.instances;
        let mut out = vec![0.0; self.gaussians * k];
        for i in 0..self.gaussians {
            let row = &self.counts[i * k..(i + 1) * k];
            let mass: f64 = row.iter().sum();
            let dst = &mut out[i * k..(i + 1) * k];
            if mass > 0.0 {
                for (d, &c) in dst.iter_mut().zip(row) {
                    *d = c / mass;
                }
            } else {
                dst.fill(1.0 / k as f64);
            }
        }
        out
    }

    /// Writes the finalized identities into `set` and resets the calibration
    /// log-factors to zero (multiplier 1) as the neutral starting point.
    pub fn apply(&self, set: &mut GaussianSet) -> Result<()> {
        if set.len() != self.gaussians || set.instance_count != self.instances {
            return Err(Error::ShapeMismatch(format!(
                "accumulator is {}x{}, set is {}x{}",
                self.gaussians,
                self.instances,
                set.len(),
                set.instance_count
            )));
        }
        set.base_identity = self.finalize();
        set.calibration.fill(0.0);
        Ok(())
    }
}

/// Renders every frame with contribution lists, accumulates the evidence,
/// and writes the resulting base identities into `set` (calibration reset
/// to neutral). Returns the accumulator for diagnostics.
pub fn estimate_identities(
    set: &mut GaussianSet,
    field: &DeformationField,
    frames: &[MaskFrame],
) -> Result<IdentityAccumulator> {
    if frames.is_empty() {
        return Err(Error::Usage("identity estimation needs at least one labeled frame".into()));
    }
    let options = RenderOptions { contributions: true, cache: false };
    let partials: Vec<IdentityAccumulator> = frames
        .par_iter()
        .map(|frame| -> Result<IdentityAccumulator> {
            let buffers = render(set, field, frame.camera, frame.time, options)?;
            let mut acc = IdentityAccumulator::new(set.len(), set.instance_count);
            acc.accumulate(&buffers, frame.labels)?;
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut acc = IdentityAccumulator::new(set.len(), set.instance_count);
    for partial in &partials {
        acc.merge(partial)?;
    }
    acc.apply(set)?;
    Ok(acc)
}
