//! Synthetic blob scenes with known ground truth.
//!
//! Each blob is a small cluster of nearly opaque Gaussians sharing one
//! instance label and color, moving along a straight or quadratic-Bezier
//! trajectory while a camera orbits the scene. RGB frames and masks come from
//! the reference renderer and the panoptic argmax rule, so a generated scene
//! is exactly realizable by the model — the returned ground-truth sets serve
//! as oracles for identity estimation and end-to-end training checks.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::UnitBall;
use rayon::prelude::*;

use crate::camera::Camera;
use crate::data::{FrameObservation, SceneDataset, Split};
use crate::deform::{DeformConfig, DeformationField};
use crate::error::{Error, Result};
use crate::eval::panoptic_map;
use crate::gaussians::{logit, GaussianSet, IDENTITY_QUATERNION};
use crate::splat::{render_reference, RenderOptions};

/// One blob: an instance-labeled cluster traveling from `start` to `end`
/// (through `control` if given, as a quadratic Bezier) over the sequence.
#[derive(Debug, Clone)]
pub struct BlobSpec {
    /// Instance label, 1-based; labels across blobs must be dense `1..=K`.
    pub instance: u16,
    pub color: Vector3<f64>,
    /// Nominal world-space radius of the rendered blob.
    pub radius: f64,
    pub start: Vector3<f64>,
    pub end: Vector3<f64>,
    pub control: Option<Vector3<f64>>,
    /// Remap time with smoothstep so the blob starts and stops gently
    /// (zero velocity at both endpoints).
    pub ease: bool,
}

impl BlobSpec {
    /// Blob center at normalized time `t`.
    pub fn center(&self, t: f64) -> Vector3<f64> {
        let t = if self.ease { t * t * (3.0 - 2.0 * t) } else { t };
        match self.control {
            Some(c) => {
                let u = 1.0 - t;
                self.start * (u * u) + c * (2.0 * u * t) + self.end * (t * t)
            }
            None => self.start * (1.0 - t) + self.end * t,
        }
    }

    fn waypoints(&self) -> Vec<Vector3<f64>> {
        let mut points = vec![self.start, self.end];
        points.extend(self.control);
        points
    }
}

/// Camera path: an arc of `sweep` radians at `radius` from the origin,
/// `height` above it, always looking at the origin.
#[derive(Debug, Clone, Copy)]
pub struct OrbitSpec {
    pub radius: f64,
    pub height: f64,
    pub sweep: f64,
    pub focal: f64,
}

impl OrbitSpec {
    /// Camera for normalized time `t`, centered on the arc's midpoint.
    pub fn camera(&self, t: f64, width: usize, height: usize) -> Result<Camera> {
        let angle = self.sweep * (t - 0.5);
        let eye = Vector3::new(
            self.radius * angle.sin(),
            self.height,
            -self.radius * angle.cos(),
        );
        Camera::look_at(
            eye,
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
            self.focal,
            self.focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
        )
    }
}

/// Full description of a synthetic scene.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Gaussians drawn per blob cluster.
    pub gaussians_per_blob: usize,
    pub blobs: Vec<BlobSpec>,
    pub orbit: OrbitSpec,
    pub bbox: (Vector3<f64>, Vector3<f64>),
}

/// Ground truth accompanying a synthetic dataset: the cluster at its start
/// configuration plus the exact per-frame Gaussian sets used for rendering.
#[derive(Debug, Clone)]
pub struct SynthTruth {
    pub canonical: GaussianSet,
    pub frame_sets: Vec<GaussianSet>,
}

fn validate_spec(spec: &SynthSpec) -> Result<()> {
    if spec.width == 0 || spec.height == 0 || spec.frames == 0 {
        return Err(Error::InvalidArgument(format!(
            "scene needs positive size and frame count, got {}x{} with {} frames",
            spec.width, spec.height, spec.frames
        )));
    }
    if spec.gaussians_per_blob == 0 || spec.blobs.is_empty() {
        return Err(Error::InvalidArgument("need at least one blob with one Gaussian".into()));
    }
    let mut ids: Vec<u16> = spec.blobs.iter().map(|b| b.instance).collect();
    ids.sort_unstable();
    let dense: Vec<u16> = (1..=spec.blobs.len() as u16).collect();
    if ids != dense {
        return Err(Error::InvalidArgument(format!(
            "blob instance ids must be dense 1..={}, got {ids:?}",
            spec.blobs.len()
        )));
    }
    let (lo, hi) = spec.bbox;
    for blob in &spec.blobs {
        if !(blob.radius > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "blob {} needs a positive radius",
                blob.instance
            )));
        }
        for point in blob.waypoints() {
            for axis in 0..3 {
                if point[axis] - blob.radius < lo[axis] || point[axis] + blob.radius > hi[axis] {
                    return Err(Error::InvalidArgument(format!(
                        "blob {} trajectory leaves the scene bounds",
                        blob.instance
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Builds the dataset and its ground truth. `seed` fixes the cluster shapes.
pub fn synth_scene(spec: &SynthSpec, seed: u64) -> Result<(SceneDataset, SynthTruth)> {
    validate_spec(spec)?;
    let k = spec.blobs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Per-blob member offsets, reused at every frame so the cluster moves
    // rigidly.
    let offsets: Vec<Vec<Vector3<f64>>> = spec
        .blobs
        .iter()
        .map(|blob| {
            (0..spec.gaussians_per_blob)
                .map(|_| {
                    let dir: [f64; 3] = rng.sample(UnitBall);
                    Vector3::from(dir) * (0.5 * blob.radius)
                })
                .collect()
        })
        .collect();

    let mut canonical = GaussianSet::empty(k);
    for (blob, blob_offsets) in spec.blobs.iter().zip(&offsets) {
        let sigma = 0.45 * blob.radius;
        for offset in blob_offsets {
            let index = canonical.len();
            canonical.push(
                blob.start + offset,
                IDENTITY_QUATERNION,
                Vector3::new(sigma.ln(), sigma.ln(), sigma.ln()),
                blob.color,
                logit(0.95),
                logit(0.95),
            );
            let row = &mut canonical.base_identity[index * k..(index + 1) * k];
            row.fill(0.0);
            row[usize::from(blob.instance) - 1] = 1.0;
        }
    }

    // The ground-truth sets already carry their motion; render them through
    // an identity (all-zero) deformation field.
    let field = DeformationField::zeros(&DeformConfig::small());
    let times: Vec<f64> = (0..spec.frames)
        .map(|f| if spec.frames == 1 { 0.0 } else { f as f64 / (spec.frames - 1) as f64 })
        .collect();
    let cameras: Vec<Camera> = times
        .iter()
        .map(|&t| spec.orbit.camera(t, spec.width, spec.height))
        .collect::<Result<_>>()?;

    let rendered: Vec<(GaussianSet, FrameObservation)> = times
        .par_iter()
        .enumerate()
        .map(|(idx, &t)| {
            let mut set = canonical.clone();
            let mut cursor = 0;
            for (blob, blob_offsets) in spec.blobs.iter().zip(&offsets) {
                let center = blob.center(t);
                for offset in blob_offsets {
                    set.positions[cursor] = center + offset;
                    cursor += 1;
                }
            }
            let buffers = render_reference(
                &set,
                &field,
                &cameras[idx],
                t,
                RenderOptions { contributions: false, cache: false },
            )?;
            let labels = panoptic_map(&buffers);
            let split = if idx % 8 == 0 { Split::Test } else { Split::Train };
            let frame =
                FrameObservation { time: t, camera: idx, rgb: buffers.color.clone(), labels, split };
            Ok((set, frame))
        })
        .collect::<Result<_>>()?;

    let mut frame_sets = Vec::with_capacity(spec.frames);
    let mut frames = Vec::with_capacity(spec.frames);
    for (set, frame) in rendered {
        frame_sets.push(set);
        frames.push(frame);
    }

    let scene = SceneDataset { cameras, frames, instances: k, bbox: spec.bbox };
    Ok((scene, SynthTruth { canonical, frame_sets }))
}

/// Named preset scenes.
///
/// * `blobs3-occlude` — 60 frames at 64x64 with three blobs; the green blob
///   sweeps across the line of sight of the blue one mid-sequence, occluding
///   most of it.
/// * `blobs2-static` — 8 frames at 32x32 with two motionless blobs; every
///   frame shows both, which makes it a clean identity-estimation oracle.
pub fn preset(name: &str) -> Result<SynthSpec> {
    match name {
        "blobs3-occlude" => Ok(SynthSpec {
            width: 64,
            height: 64,
            frames: 60,
            gaussians_per_blob: 16,
            blobs: vec![
                BlobSpec {
                    instance: 1,
                    color: Vector3::new(0.85, 0.25, 0.2),
                    radius: 0.26,
                    start: Vector3::new(-0.42, 0.3, 0.1),
                    end: Vector3::new(-0.42, 0.3, 0.1),
                    control: None,
                    ease: false,
                },
                BlobSpec {
                    instance: 2,
                    color: Vector3::new(0.2, 0.8, 0.3),
                    radius: 0.28,
                    start: Vector3::new(0.33, -0.04, -0.3),
                    end: Vector3::new(-0.33, -0.1, -0.3),
                    control: None,
                    ease: true,
                },
                BlobSpec {
                    instance: 3,
                    color: Vector3::new(0.25, 0.4, 0.9),
                    radius: 0.3,
                    start: Vector3::new(0.02, 0.2, 0.45),
                    end: Vector3::new(0.02, 0.2, 0.45),
                    control: None,
                    ease: false,
                },
            ],
            orbit: OrbitSpec { radius: 3.0, height: 0.15, sweep: 0.3, focal: 80.0 },
            bbox: (Vector3::new(-1.0, -1.0, -1.0), Vector3::new(1.0, 1.0, 1.0)),
        }),
        "blobs2-static" => Ok(SynthSpec {
            width: 32,
            height: 32,
            frames: 8,
            gaussians_per_blob: 8,
            blobs: vec![
                BlobSpec {
                    instance: 1,
                    color: Vector3::new(0.9, 0.3, 0.2),
                    radius: 0.22,
                    start: Vector3::new(-0.4, 0.1, 0.0),
                    end: Vector3::new(-0.4, 0.1, 0.0),
                    control: None,
                    ease: false,
                },
                BlobSpec {
                    instance: 2,
                    color: Vector3::new(0.2, 0.35, 0.9),
                    radius: 0.24,
                    start: Vector3::new(0.42, -0.12, 0.1),
                    end: Vector3::new(0.42, -0.12, 0.1),
                    control: None,
                    ease: false,
                },
            ],
            orbit: OrbitSpec { radius: 2.8, height: 0.1, sweep: 0.2, focal: 44.0 },
            bbox: (Vector3::new(-1.0, -1.0, -1.0), Vector3::new(1.0, 1.0, 1.0)),
        }),
        other => Err(Error::InvalidArgument(format!("unknown preset {other:?}"))),
    }
}

/// Names accepted by [`preset`].
pub const PRESETS: [&str; 2] = ["blobs3-occlude", "blobs2-static"];
