//! Flat parameter packing shared by the optimizer, the gradient checks, and
//! the checkpoint format.
//!
//! Layout (all f64, structure-of-arrays):
//!
//! 1. positions            `N * 3`   (x, y, z per Gaussian)
//! 2. rotations            `N * 4`   (w, x, y, z)
//! 3. log-scales           `N * 3`
//! 4. colors               `N * 3`   (r, g, b)
//! 5. opacity logits       `N`
//! 6. occupancy logits     `N`
//! 7. base identities      `N * K`   (row-major by Gaussian)
//! 8. calibration factors  `N * K`
//! 9. MLP weights: trunk layers in order, then the position / rotation /
//!    scale heads; per layer row-major weights then bias.
//!
//! Total length: `N * (3+4+3+3+1+1+K+K) + weight_count`.

use std::ops::Range;

use nalgebra::Vector3;

use crate::deform::DeformationField;
use crate::error::{Error, Result};
use crate::gaussians::GaussianSet;

/// Parameter groups in packing order. Each group gets its own learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Position,
    Rotation,
    Scale,
    Color,
    Opacity,
    Occupancy,
    BaseIdentity,
    Calibration,
    FieldWeights,
}

/// All groups in packing order.
pub const GROUPS: [ParamGroup; 9] = [
    ParamGroup::Position,
    ParamGroup::Rotation,
    ParamGroup::Scale,
    ParamGroup::Color,
    ParamGroup::Opacity,
    ParamGroup::Occupancy,
    ParamGroup::BaseIdentity,
    ParamGroup::Calibration,
    ParamGroup::FieldWeights,
];

/// Index arithmetic for the packed layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub gaussians: usize,
    pub instances: usize,
    pub weight_count: usize,
}

impl ParamLayout {
    /// Layout for a concrete set/field pair.
    pub fn of(set: &GaussianSet, field: &DeformationField) -> Self {
        ParamLayout {
            gaussians: set.len(),
            instances: set.instance_count,
            weight_count: field.weight_count(),
        }
    }

    /// Packed length: `N * (15 + 2K) + weight_count`.
    pub fn total_len(&self) -> usize {
        self.gaussians * (15 + 2 * self.instances) + self.weight_count
    }

    /// Width of one group's block.
    fn group_width(&self, group: ParamGroup) -> usize {
        let n = self.gaussians;
        let k = self.instances;
        match group {
            ParamGroup::Position | ParamGroup::Scale | ParamGroup::Color => 3 * n,
            ParamGroup::Rotation => 4 * n,
            ParamGroup::Opacity | ParamGroup::Occupancy => n,
            ParamGroup::BaseIdentity | ParamGroup::Calibration => k * n,
            ParamGroup::FieldWeights => self.weight_count,
        }
    }

    /// Index range of a group within the packed vector.
    pub fn range(&self, group: ParamGroup) -> Range<usize> {
        let mut start = 0;
        for g in GROUPS {
            let w = self.group_width(g);
            if g == group {
                return start..start + w;
            }
            start += w;
        }
        unreachable!("GROUPS covers every variant")
    }

    /// Group owning packed index `idx`.
    pub fn group_of(&self, idx: usize) -> ParamGroup {
        let mut start = 0;
        for g in GROUPS {
            start += self.group_width(g);
            if idx < start {
                return g;
            }
        }
        panic!("index {idx} outside packed layout of length {}", self.total_len());
    }

    /// Packed index ranges belonging to Gaussian `i` (one per per-Gaussian
    /// group, in group order). Used to reset optimizer moments when a
    /// Gaussian is overwritten.
    pub fn gaussian_ranges(&self, i: usize) -> Vec<Range<usize>> {
        let k = self.instances;
        GROUPS
            .iter()
            .filter(|g| !matches!(g, ParamGroup::FieldWeights))
            .map(|&g| {
                let base = self.range(g).start;
                let width = match g {
                    ParamGroup::Position | ParamGroup::Scale | ParamGroup::Color => 3,
                    ParamGroup::Rotation => 4,
                    ParamGroup::Opacity | ParamGroup::Occupancy => 1,
                    ParamGroup::BaseIdentity | ParamGroup::Calibration => k,
                    ParamGroup::FieldWeights => unreachable!(),
                };
                base + i * width..base + (i + 1) * width
            })
            .collect()
    }
}

fn push_vec3s(out: &mut Vec<f64>, vs: &[Vector3<f64>]) {
    for v in vs {
        out.extend_from_slice(&[v.x, v.y, v.z]);
    }
}

/// Packs all optimizable state into one flat vector (see module docs for the
/// layout).
pub fn pack_parameters(set: &GaussianSet, field: &DeformationField) -> Vec<f64> {
    let layout = ParamLayout::of(set, field);
    let mut out = Vec::with_capacity(layout.total_len());
    push_vec3s(&mut out, &set.positions);
    for q in &set.rotations {
        out.extend_from_slice(q);
    }
    push_vec3s(&mut out, &set.log_scales);
    push_vec3s(&mut out, &set.colors);
    out.extend_from_slice(&set.opacity_logits);
    out.extend_from_slice(&set.occupancy_logits);
    out.extend_from_slice(&set.base_identity);
    out.extend_from_slice(&set.calibration);
    for layer in field.layers() {
        out.extend_from_slice(&layer.weights);
        out.extend_from_slice(&layer.bias);
    }
    debug_assert_eq!(out.len(), layout.total_len());
    out
}

/// Unpacks a flat vector produced by [`pack_parameters`] back into `set` and
/// `field` (whose shapes fix the layout). Errors on length mismatch; does
/// not re-normalize anything.
pub fn unpack_parameters(
    set: &mut GaussianSet,
    field: &mut DeformationField,
    packed: &[f64],
) -> Result<()> {
    let layout = ParamLayout::of(set, field);
    if packed.len() != layout.total_len() {
        return Err(Error::ShapeMismatch(format!(
            "packed vector has {} entries, layout expects {}",
            packed.len(),
            layout.total_len()
        )));
    }
    let n = set.len();
    let k = set.instance_count;
    let mut idx = 0;
    for i in 0..n {
        set.positions[i] = Vector3::new(packed[idx], packed[idx + 1], packed[idx + 2]);
        idx += 3;
    }
    for i in 0..n {
        set.rotations[i].copy_from_slice(&packed[idx..idx + 4]);
        idx += 4;
    }
    for i in 0..n {
        set.log_scales[i] = Vector3::new(packed[idx], packed[idx + 1], packed[idx + 2]);
        idx += 3;
    }
    for i in 0..n {
        set.colors[i] = Vector3::new(packed[idx], packed[idx + 1], packed[idx + 2]);
        idx += 3;
    }
    set.opacity_logits.copy_from_slice(&packed[idx..idx + n]);
    idx += n;
    set.occupancy_logits.copy_from_slice(&packed[idx..idx + n]);
    idx += n;
    set.base_identity.copy_from_slice(&packed[idx..idx + n * k]);
    idx += n * k;
    set.calibration.copy_from_slice(&packed[idx..idx + n * k]);
    idx += n * k;
    for layer in field.layers_mut() {
        let w = layer.weights.len();
        layer.weights.copy_from_slice(&packed[idx..idx + w]);
        idx += w;
        let b = layer.bias.len();
        layer.bias.copy_from_slice(&packed[idx..idx + b]);
        idx += b;
    }
    debug_assert_eq!(idx, packed.len());
    Ok(())
}

/// Gradients for every optimizable parameter, mirroring the set/field
/// structure. [`Gradients::to_packed`] flattens them in the exact order of
/// [`pack_parameters`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub positions: Vec<Vector3<f64>>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<Vector3<f64>>,
    pub colors: Vec<Vector3<f64>>,
    pub opacity_logits: Vec<f64>,
    pub occupancy_logits: Vec<f64>,
    /// Row-major `N * K`.
    pub base_identity: Vec<f64>,
    /// Row-major `N * K`.
    pub calibration: Vec<f64>,
    /// Same shape as the deformation field; holds weight gradients.
    pub field: DeformationField,
}

impl Gradients {
    /// Zero gradients shaped like `set` and `field`.
    pub fn zeros(set: &GaussianSet, field: &DeformationField) -> Self {
        let n = set.len();
        let k = set.instance_count;
        Gradients {
            positions: vec![Vector3::zeros(); n],
            rotations: vec![[0.0; 4]; n],
            log_scales: vec![Vector3::zeros(); n],
            colors: vec![Vector3::zeros(); n],
            opacity_logits: vec![0.0; n],
            occupancy_logits: vec![0.0; n],
            base_identity: vec![0.0; n * k],
            calibration: vec![0.0; n * k],
            field: field.zeros_like(),
        }
    }

    /// Flattens in [`pack_parameters`] order.
    pub fn to_packed(&self) -> Vec<f64> {
        let mut out = Vec::new();
        push_vec3s(&mut out, &self.positions);
        for q in &self.rotations {
            out.extend_from_slice(q);
        }
        push_vec3s(&mut out, &self.log_scales);
        push_vec3s(&mut out, &self.colors);
        out.extend_from_slice(&self.opacity_logits);
        out.extend_from_slice(&self.occupancy_logits);
        out.extend_from_slice(&self.base_identity);
        out.extend_from_slice(&self.calibration);
        for layer in self.field.layers() {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.bias);
        }
        out
    }
}
