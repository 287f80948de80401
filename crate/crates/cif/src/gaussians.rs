//! Instance-embedded 3D Gaussian set and volumetric field queries.
//!
//! Each primitive carries geometry (canonical mean, rotation quaternion,
//! log-scales), appearance (color, opacity logit), and an instance layer:
//! an occupancy logit, a base identity distribution over K instances, and a
//! per-instance calibration log-factor. The calibrated identity of Gaussian
//! `i` is
//!
//! ```text
//! p_i^k = p_hat_i^k * exp(lambda_i^k) / sum_k' p_hat_i^k' * exp(lambda_i^k')
//! ```
//!
//! so a global rescaling of the multipliers cancels. The volumetric field at
//! a point combines primitives as independent occupancy events and blends
//! identities by occupancy-weighted kernel mass.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use crate::deform::DeformationField;
use crate::error::{Error, Result};

/// Logistic sigmoid; opacity and occupancy are stored as logits.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse sigmoid; panics outside (0, 1).
pub fn logit(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "logit domain is (0,1), got {p}");
    (p / (1.0 - p)).ln()
}

/// A set of instance-embedded Gaussians, stored structure-of-arrays.
///
/// Invariants (checked by [`GaussianSet::validate`]):
/// - all per-Gaussian arrays have the same length `N`;
/// - `base_identity` and `calibration` hold `N * K` entries, row-major by
///   Gaussian;
/// - every base identity row is non-negative and sums to 1 within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSet {
    /// Canonical (t-independent) means.
    pub positions: Vec<Vector3<f64>>,
    /// Rotation quaternions `(w, x, y, z)`, kept unit-norm after optimizer
    /// steps; the deformation path re-normalizes `q + dq` anyway.
    pub rotations: Vec<[f64; 4]>,
    /// Per-axis log-scales; world scales are `exp(log_scales)`.
    pub log_scales: Vec<Vector3<f64>>,
    /// RGB colors, nominally in [0,1] per channel.
    pub colors: Vec<Vector3<f64>>,
    /// Opacity logits; alpha = sigmoid(opacity_logits).
    pub opacity_logits: Vec<f64>,
    /// Occupancy logits; pi = sigmoid(occupancy_logits).
    pub occupancy_logits: Vec<f64>,
    /// Base identity distributions, `N * K` row-major, rows sum to 1.
    pub base_identity: Vec<f64>,
    /// Calibration log-factors lambda, `N * K` row-major.
    pub calibration: Vec<f64>,
    /// Replica counters used by resampling; reset to zero after each round.
    pub replica_counts: Vec<u32>,
    /// Number of instances K (instance ids are 1..=K; 0 is background).
    pub instance_count: usize,
}

impl GaussianSet {
    /// An empty set with `K` instances.
    pub fn empty(instance_count: usize) -> Self {
        GaussianSet {
            positions: Vec::new(),
            rotations: Vec::new(),
            log_scales: Vec::new(),
            colors: Vec::new(),
            opacity_logits: Vec::new(),
            occupancy_logits: Vec::new(),
            base_identity: Vec::new(),
            calibration: Vec::new(),
            replica_counts: Vec::new(),
            instance_count,
        }
    }

    /// Number of Gaussians.
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    /// True when the set holds no Gaussians.
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Appends one Gaussian with uniform base identity and zero calibration.
    #[allow(clippy::too_many_arguments)]
    pub fn push(
        &mut self,
        position: Vector3<f64>,
        rotation: [f64; 4],
        log_scale: Vector3<f64>,
        color: Vector3<f64>,
        opacity_logit: f64,
        occupancy_logit: f64,
    ) {
        let k = self.instance_count;
        self.positions.push(position);
        self.rotations.push(rotation);
        self.log_scales.push(log_scale);
        self.colors.push(color);
        self.opacity_logits.push(opacity_logit);
        self.occupancy_logits.push(occupancy_logit);
        self.base_identity.extend(std::iter::repeat(1.0 / k.max(1) as f64).take(k));
        self.calibration.extend(std::iter::repeat(0.0).take(k));
        self.replica_counts.push(0);
    }

    /// Checks the structural invariants listed on the type.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let k = self.instance_count;
        if k == 0 {
            return Err(Error::InvalidArgument("instance count must be at least 1".into()));
        }
        let lens = [
            self.rotations.len(),
            self.log_scales.len(),
            self.colors.len(),
            self.opacity_logits.len(),
            self.occupancy_logits.len(),
            self.replica_counts.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::ShapeMismatch(format!(
                "per-gaussian arrays disagree on N: positions={n}, others={lens:?}"
            )));
        }
        if self.base_identity.len() != n * k || self.calibration.len() != n * k {
            return Err(Error::ShapeMismatch(format!(
                "identity arrays must hold N*K = {} entries, got {} and {}",
                n * k,
                self.base_identity.len(),
                self.calibration.len()
            )));
        }
        for i in 0..n {
            let row = &self.base_identity[i * k..(i + 1) * k];
            if row.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "base identity row {i} has a negative or non-finite entry"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "base identity row {i} sums to {sum}, expected 1 within 1e-9"
                )));
            }
        }
        Ok(())
    }

    /// Base identity row of Gaussian `i`.
    pub fn base_identity_row(&self, i: usize) -> &[f64] {
        let k = self.instance_count;
        &self.base_identity[i * k..(i + 1) * k]
    }

    /// Calibration row of Gaussian `i`.
    pub fn calibration_row(&self, i: usize) -> &[f64] {
        let k = self.instance_count;
        &self.calibration[i * k..(i + 1) * k]
    }

    /// Opacity `alpha_i = sigmoid(a_i)`.
    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    /// Occupancy `pi_i = sigmoid(o_i)`.
    pub fn occupancy(&self, i: usize) -> f64 {
        sigmoid(self.occupancy_logits[i])
    }

    /// Calibrated identity distribution of Gaussian `i`:
    /// `normalize(p_hat ∘ exp(lambda))`. Errors if the normalizer is zero or
    /// non-finite.
    pub fn effective_identity(&self, i: usize) -> Result<Vec<f64>> {
        let multipliers: Vec<f64> =
            self.calibration_row(i).iter().map(|&l| l.exp()).collect();
        calibrated_identity(self.base_identity_row(i), &multipliers)
            .map_err(|_| self.degenerate(i, &multipliers))
    }

    fn degenerate(&self, i: usize, multipliers: &[f64]) -> Error {
        let normalizer: f64 = self
            .base_identity_row(i)
            .iter()
            .zip(multipliers)
            .map(|(&p, &m)| p * m)
            .sum();
        Error::DegenerateDistribution { index: i, normalizer }
    }

    /// Canonical world covariance `R(q) diag(exp(2*log_scales)) R(q)^T`.
    pub fn canonical_covariance(&self, i: usize) -> Matrix3<f64> {
        let r = quaternion_to_matrix(&normalize_quaternion(&self.rotations[i]));
        let s = self.log_scales[i].map(f64::exp);
        covariance_from(&r, &s)
    }
}

/// `normalize(p_hat ∘ m)`: the calibrated identity for explicit multipliers.
/// Used directly by tests that probe scale invariance; errors if the
/// normalizer is zero or non-finite (index 0 is reported since the caller
/// owns the context).
pub fn calibrated_identity(p_hat: &[f64], multipliers: &[f64]) -> Result<Vec<f64>> {
    debug_assert_eq!(p_hat.len(), multipliers.len());
    let weighted: Vec<f64> = p_hat.iter().zip(multipliers).map(|(&p, &m)| p * m).collect();
    let normalizer: f64 = weighted.iter().sum();
    if !(normalizer > 0.0) || !normalizer.is_finite() {
        return Err(Error::DegenerateDistribution { index: 0, normalizer });
    }
    Ok(weighted.into_iter().map(|w| w / normalizer).collect())
}

/// Builds `R diag(s^2) R^T`.
pub fn covariance_from(rotation: &Matrix3<f64>, scales: &Vector3<f64>) -> Matrix3<f64> {
    let d = Matrix3::from_diagonal(&scales.map(|s| s * s));
    rotation * d * rotation.transpose()
}

/// Normalizes a quaternion `(w, x, y, z)`; panics on zero norm (parameter
/// quaternions are kept near unit norm; the deformation path reports a
/// degenerate-rotation error before this can trip).
pub fn normalize_quaternion(q: &[f64; 4]) -> [f64; 4] {
    let n = quaternion_norm(q);
    assert!(n > 0.0, "cannot normalize zero quaternion");
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Euclidean norm of the 4 quaternion coefficients.
pub fn quaternion_norm(q: &[f64; 4]) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quaternion_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Identity quaternion.
pub const IDENTITY_QUATERNION: [f64; 4] = [1.0, 0.0, 0.0, 0.0];

/// A random unit quaternion (uniform over rotations).
pub fn random_unit_quaternion<R: Rng>(rng: &mut R) -> [f64; 4] {
    loop {
        let q = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n = quaternion_norm(&q);
        if n > 1e-3 {
            return [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
        }
    }
}

/// Result of a volumetric field query at one point in space-time.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSample {
    /// Occupancy `pi(x,t) = 1 - prod_i (1 - pi_i G_i(x,t))`.
    pub occupancy: f64,
    /// Conditional identity distribution `p(x,t,.)`, length K; uniform when
    /// no Gaussian contributes.
    pub identity: Vec<f64>,
    /// Joint response `gamma(x,t,k) = occupancy * identity[k-1]` for the
    /// queried instance.
    pub joint: f64,
}

/// Evaluates the consistent instance field at world point `x` and time `t`
/// for instance `k` (1-based; `1 <= k <= K`).
///
/// Occupancy combines Gaussians as independent events; the conditional
/// identity is the kernel-and-occupancy weighted mixture of calibrated
/// per-Gaussian identities. With no contributing Gaussians the occupancy is
/// 0 and the identity is uniform.
pub fn field_query(
    set: &GaussianSet,
    field: &DeformationField,
    x: &Vector3<f64>,
    t: f64,
    k: usize,
) -> Result<FieldSample> {
    let kk = set.instance_count;
    if k == 0 || k > kk {
        return Err(Error::InvalidArgument(format!(
            "instance index must satisfy 1 <= k <= {kk}, got {k}"
        )));
    }
    let state = field.deform(set, t)?;

    let mut vacancy = 1.0; // prod_i (1 - pi_i G_i)
    let mut weights = vec![0.0; set.len()];
    let mut weight_sum = 0.0;
    for i in 0..set.len() {
        let rot = quaternion_to_matrix(&state.rotations[i]);
        let d = rot.transpose() * (x - state.positions[i]);
        let s = &state.scales[i];
        let q = (d.x / s.x).powi(2) + (d.y / s.y).powi(2) + (d.z / s.z).powi(2);
        let kernel = (-0.5 * q).exp();
        let w = set.occupancy(i) * kernel;
        vacancy *= 1.0 - w;
        weights[i] = w;
        weight_sum += w;
    }

    let identity = if weight_sum > 0.0 {
        let mut mix = vec![0.0; kk];
        for i in 0..set.len() {
            if weights[i] == 0.0 {
                continue;
            }
            let p = set.effective_identity(i)?;
            for (m, &pk) in mix.iter_mut().zip(&p) {
                *m += weights[i] * pk;
            }
        }
        for m in &mut mix {
            *m /= weight_sum;
        }
        mix
    } else {
        vec![1.0 / kk as f64; kk]
    };

    let occupancy = 1.0 - vacancy;
    let joint = occupancy * identity[k - 1];
    Ok(FieldSample { occupancy, identity, joint })
}
