//! Randomized scene builders shared by the unit and integration test suites.
//!
//! Two families with different purposes:
//!
//! - [`random_scene`] draws unrestricted parameters that exercise culling,
//!   term skipping and early exits — for differential testing between the
//!   tiled and reference compositors, where both sides see identical
//!   discontinuities.
//! - [`smooth_scene`] places wide, low-opacity Gaussians centred in the
//!   image with comfortable margins to every hard threshold (near plane,
//!   3-sigma cull, term skip, transmittance floor, depth-sort ties), so
//!   finite differences of the rendered maps are valid derivatives.
#![doc(hidden)]

use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::camera::Camera;
use crate::deform::{DeformConfig, DeformationField};
use crate::gaussians::{logit, random_unit_quaternion, GaussianSet};
use crate::splat::RenderUpstream;

/// A complete randomized scene.
pub struct TestScene {
    pub set: GaussianSet,
    pub field: DeformationField,
    pub camera: Camera,
    pub time: f64,
}

fn simplex_point(rng: &mut ChaCha8Rng, k: usize, floor: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(floor..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Unrestricted random scene: positions spill outside the frustum, opacities
/// span near-transparent to near-opaque, and the deformation heads carry
/// small random weights so the field moves the Gaussians.
pub fn random_scene(seed: u64, n: usize, k: usize, width: usize, height: usize) -> TestScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = GaussianSet::empty(k);
    for _ in 0..n {
        let position = Vector3::new(
            rng.gen_range(-1.5..1.5),
            rng.gen_range(-1.5..1.5),
            rng.gen_range(-1.5..1.5),
        );
        let rotation = random_unit_quaternion(&mut rng);
        let log_scale = Vector3::new(
            rng.gen_range(0.01f64.ln()..0.3f64.ln()),
            rng.gen_range(0.01f64.ln()..0.3f64.ln()),
            rng.gen_range(0.01f64.ln()..0.3f64.ln()),
        );
        let color = Vector3::new(rng.gen(), rng.gen(), rng.gen());
        let opacity_logit = rng.gen_range(-6.0..6.0);
        let occupancy_logit = rng.gen_range(-6.0..6.0);
        set.push(position, rotation, log_scale, color, opacity_logit, occupancy_logit);
        let i = set.len() - 1;
        let p_hat = simplex_point(&mut rng, k, 0.05);
        set.base_identity[i * k..(i + 1) * k].copy_from_slice(&p_hat);
        for kk in 0..k {
            set.calibration[i * k + kk] = rng.gen_range(-0.5..0.5);
        }
    }

    let eye = Vector3::new(
        rng.gen_range(-0.5..0.5),
        rng.gen_range(-0.5..0.5),
        rng.gen_range(-2.6..-2.2),
    );
    let f = width as f64 * 0.8;
    let camera = Camera::look_at(
        eye,
        Vector3::zeros(),
        Vector3::new(0.0, 1.0, 0.0),
        f,
        f,
        width as f64 / 2.0,
        height as f64 / 2.0,
        width,
        height,
    )
    .expect("orbit pose is valid");

    let mut field_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut field = DeformationField::seeded(&DeformConfig::small(), &mut field_rng);
    randomize_heads(&mut field, &mut rng, 0.02);

    TestScene { set, field, camera, time: rng.gen_range(0.0..1.0) }
}

/// Scene tailored for finite-difference checks; see the module docs. All
/// kernels stay above ~1e-2 of their skip threshold across the whole image
/// and depth gaps exceed 1e-3, so 1e-5 parameter wiggles never cross a
/// branch.
pub fn smooth_scene(seed: u64, n: usize, k: usize, width: usize, height: usize) -> TestScene {
    let f = width as f64 * 0.9;
    let camera = Camera::axis_aligned(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height)
        .expect("intrinsics are valid");
    let time = 0.35;

    // Rebuild the whole draw until the *deformed* view depths keep gaps
    // comfortably larger than the finite-difference step, so a 1e-5 wiggle
    // of any parameter can never flip the compositing order. Deterministic
    // for a given seed.
    for attempt in 0u64.. {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ attempt.wrapping_mul(0x9e37_79b9));
        let mut set = GaussianSet::empty(k);
        for _ in 0..n {
            let position = Vector3::new(
                rng.gen_range(-0.25..0.25),
                rng.gen_range(-0.25..0.25),
                rng.gen_range(1.7..2.3),
            );
            let rotation = random_unit_quaternion(&mut rng);
            let base = rng.gen_range(1.2f64..1.8).ln();
            let log_scale = Vector3::new(
                base + rng.gen_range(-0.1..0.1),
                base + rng.gen_range(-0.1..0.1),
                base + rng.gen_range(-0.1..0.1),
            );
            let color = Vector3::new(
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.2..0.8),
            );
            let opacity_logit = logit(rng.gen_range(0.05..0.12));
            let occupancy_logit = logit(rng.gen_range(0.05..0.12));
            set.push(position, rotation, log_scale, color, opacity_logit, occupancy_logit);
            let i = set.len() - 1;
            let p_hat = simplex_point(&mut rng, k, 0.5);
            set.base_identity[i * k..(i + 1) * k].copy_from_slice(&p_hat);
            for kk in 0..k {
                set.calibration[i * k + kk] = rng.gen_range(-0.3..0.3);
            }
        }

        let mut field_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed ^ attempt);
        let mut field = DeformationField::seeded(&DeformConfig::small(), &mut field_rng);
        randomize_heads(&mut field, &mut rng, 0.005);

        let deformed = field.deform(&set, time).expect("test field is finite");
        let mut depths: Vec<f64> =
            deformed.positions.iter().map(|p| camera.to_camera(p).z).collect();
        depths.sort_by(f64::total_cmp);
        if depths.windows(2).all(|w| w[1] - w[0] > 1e-3) {
            return TestScene { set, field, camera, time };
        }
    }
    unreachable!("some redraw satisfies the depth-gap margin");
}

/// Fills the (zero-initialized) head layers with small random weights so the
/// deformation is active but bounded.
pub fn randomize_heads(field: &mut DeformationField, rng: &mut ChaCha8Rng, scale: f64) {
    let trunk_layers = field.trunk.len();
    for (li, layer) in field.layers_mut().into_iter().enumerate() {
        if li < trunk_layers {
            continue;
        }
        for w in layer.weights.iter_mut() {
            *w = rng.gen_range(-scale..scale);
        }
        for b in layer.bias.iter_mut() {
            *b = rng.gen_range(-scale..scale);
        }
    }
}

/// Reorders a set: entry `i` of the result is entry `perm[i]` of `set`.
pub fn permuted_set(set: &GaussianSet, perm: &[usize]) -> GaussianSet {
    assert_eq!(perm.len(), set.len());
    let k = set.instance_count;
    let mut out = GaussianSet::empty(k);
    for &src in perm {
        out.push(
            set.positions[src],
            set.rotations[src],
            set.log_scales[src],
            set.colors[src],
            set.opacity_logits[src],
            set.occupancy_logits[src],
        );
        let dst = out.len() - 1;
        out.base_identity[dst * k..(dst + 1) * k]
            .copy_from_slice(set.base_identity_row(src));
        out.calibration[dst * k..(dst + 1) * k].copy_from_slice(set.calibration_row(src));
        out.replica_counts[dst] = set.replica_counts[src];
    }
    out
}

/// Random adjoints in `[-1, 1]` for every rendered map.
pub fn random_upstream(seed: u64, width: usize, height: usize, k: usize) -> RenderUpstream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut up = RenderUpstream::zeros(width, height, k);
    for v in up
        .d_color
        .iter_mut()
        .chain(up.d_marginals.iter_mut())
        .chain(up.d_residual.iter_mut())
    {
        *v = rng.gen_range(-1.0..1.0);
    }
    up
}
