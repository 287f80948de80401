//! Time-conditioned deformation of the canonical Gaussian set.
//!
//! A small shared MLP maps the sinusoidal encoding of a canonical mean and a
//! normalized timestamp to offsets for the mean, rotation quaternion, and
//! per-axis log-scales:
//!
//! ```text
//! (dx, dq, dl) = MLP(encode(x, t))
//! mu(t) = x + dx      q(t) = normalize(q + dq)      s(t) = exp(l + dl)
//! ```
//!
//! The trunk uses ReLU activations; the three output heads are zero-
//! initialized so a freshly created field is exactly the identity
//! deformation. The backward pass is analytic and is verified against
//! central finite differences in the test suite.

use nalgebra::Vector3;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussians::{quaternion_norm, GaussianSet};

/// Norm floor under which a deformed quaternion is reported degenerate.
pub const ROTATION_NORM_FLOOR: f64 = 1e-8;

/// Gaussians per parallel work unit; fixed so reductions are bit-identical
/// at any worker count.
const CHUNK: usize = 256;

/// Architecture of the deformation field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeformConfig {
    /// Number of sinusoidal frequencies per position axis.
    pub position_frequencies: usize,
    /// Number of sinusoidal frequencies for time.
    pub time_frequencies: usize,
    /// Widths of the hidden trunk layers.
    pub hidden: Vec<usize>,
}

impl DeformConfig {
    /// The default architecture: 6 position / 4 time frequencies, two hidden
    /// layers of width 64.
    pub fn standard() -> Self {
        DeformConfig { position_frequencies: 6, time_frequencies: 4, hidden: vec![64, 64] }
    }

    /// A reduced architecture for unit tests and gradient checks.
    pub fn small() -> Self {
        DeformConfig { position_frequencies: 2, time_frequencies: 2, hidden: vec![16, 16] }
    }

    /// Length of the encoded feature vector:
    /// `4 + 2 * (3 * position_frequencies + time_frequencies)`.
    pub fn feature_len(&self) -> usize {
        4 + 2 * (3 * self.position_frequencies + self.time_frequencies)
    }
}

impl Default for DeformConfig {
    fn default() -> Self {
        DeformConfig::standard()
    }
}

/// Writes the sinusoidal encoding of `(x, t)` into `out`.
///
/// Layout: `[x, y, z, t]`, then per position axis `sin(2^j pi v), cos(2^j pi v)`
/// for `j = 0..position_frequencies`, then the same pairs for time.
pub fn encode_into(config: &DeformConfig, x: &Vector3<f64>, t: f64, out: &mut [f64]) {
    debug_assert_eq!(out.len(), config.feature_len());
    out[0] = x.x;
    out[1] = x.y;
    out[2] = x.z;
    out[3] = t;
    let mut idx = 4;
    for axis in 0..3 {
        let v = x[axis];
        for j in 0..config.position_frequencies {
            let w = std::f64::consts::PI * (1u64 << j) as f64;
            out[idx] = (w * v).sin();
            out[idx + 1] = (w * v).cos();
            idx += 2;
        }
    }
    for j in 0..config.time_frequencies {
        let w = std::f64::consts::PI * (1u64 << j) as f64;
        out[idx] = (w * t).sin();
        out[idx + 1] = (w * t).cos();
        idx += 2;
    }
}

/// Sinusoidal encoding of `(x, t)`; see [`encode_into`] for the layout.
pub fn encode(config: &DeformConfig, x: &Vector3<f64>, t: f64) -> Vec<f64> {
    let mut out = vec![0.0; config.feature_len()];
    encode_into(config, x, t, &mut out);
    out
}

/// Accumulates `d(feature)/d(x)` contributions onto `dx` given the feature
/// gradient `dfeat` and the stored feature values (sin/cos pairs reuse each
/// other as derivatives).
fn encode_backward(config: &DeformConfig, dfeat: &[f64], feat: &[f64], dx: &mut Vector3<f64>) {
    dx.x += dfeat[0];
    dx.y += dfeat[1];
    dx.z += dfeat[2];
    let mut idx = 4;
    for axis in 0..3 {
        for j in 0..config.position_frequencies {
            let w = std::f64::consts::PI * (1u64 << j) as f64;
            let (s, c) = (feat[idx], feat[idx + 1]);
            // d sin(wv)/dv = w cos(wv); d cos(wv)/dv = -w sin(wv)
            dx[axis] += dfeat[idx] * w * c - dfeat[idx + 1] * w * s;
            idx += 2;
        }
    }
    // Time features carry no parameter gradient.
}

/// A dense layer with row-major weights (`out_dim x in_dim`) and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    /// All-zero layer.
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear { in_dim, out_dim, weights: vec![0.0; in_dim * out_dim], bias: vec![0.0; out_dim] }
    }

    /// Uniform init in `(-1/sqrt(in_dim), 1/sqrt(in_dim))` for weights and
    /// bias (the usual dense-layer default).
    pub fn uniform<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut layer = Linear::zeros(in_dim, out_dim);
        for w in &mut layer.weights {
            *w = rng.gen_range(-bound..bound);
        }
        for b in &mut layer.bias {
            *b = rng.gen_range(-bound..bound);
        }
        layer
    }

    /// Number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// `out = W input + b`.
    pub fn forward(&self, input: &[f64], out: &mut [f64]) {
        debug_assert_eq!(input.len(), self.in_dim);
        debug_assert_eq!(out.len(), self.out_dim);
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.in_dim).zip(&self.bias))
        {
            let mut acc = *b;
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            *o = acc;
        }
    }

    /// Backward: accumulates weight/bias gradients for this layer and the
    /// gradient w.r.t. the layer input.
    fn backward(
        &self,
        input: &[f64],
        dout: &[f64],
        grad: &mut Linear,
        dinput: &mut [f64],
    ) {
        for (r, (&d, row)) in dout
            .iter()
            .zip(self.weights.chunks_exact(self.in_dim))
            .enumerate()
            .map(|(r, pair)| (r, (pair.0, pair.1)))
        {
            grad.bias[r] += d;
            let grow = &mut grad.weights[r * self.in_dim..(r + 1) * self.in_dim];
            for ((g, &x), (di, &w)) in
                grow.iter_mut().zip(input).zip(dinput.iter_mut().zip(row))
            {
                *g += d * x;
                *di += d * w;
            }
        }
    }
}

/// The deformation MLP: shared trunk plus three zero-initialized heads.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    pub config: DeformConfig,
    pub trunk: Vec<Linear>,
    pub head_position: Linear,
    pub head_rotation: Linear,
    pub head_scale: Linear,
}

impl DeformationField {
    /// Field with all weights zero: the exact identity deformation.
    pub fn zeros(config: &DeformConfig) -> Self {
        let mut dims = vec![config.feature_len()];
        dims.extend_from_slice(&config.hidden);
        let trunk = dims
            .windows(2)
            .map(|w| Linear::zeros(w[0], w[1]))
            .collect::<Vec<_>>();
        let last = *dims.last().expect("at least the input dim");
        DeformationField {
            config: config.clone(),
            trunk,
            head_position: Linear::zeros(last, 3),
            head_rotation: Linear::zeros(last, 4),
            head_scale: Linear::zeros(last, 3),
        }
    }

    /// Field with seeded trunk weights and zero heads, so the initial
    /// deformation is still exactly the identity.
    pub fn seeded<R: Rng>(config: &DeformConfig, rng: &mut R) -> Self {
        let mut field = DeformationField::zeros(config);
        for layer in &mut field.trunk {
            *layer = Linear::uniform(layer.in_dim, layer.out_dim, rng);
        }
        field
    }

    /// Same-shaped field with all parameters zero (gradient holder).
    pub fn zeros_like(&self) -> Self {
        DeformationField::zeros(&self.config)
    }

    /// Layers in serialization order: trunk, then position/rotation/scale
    /// heads.
    pub fn layers(&self) -> impl Iterator<Item = &Linear> {
        self.trunk
            .iter()
            .chain(std::iter::once(&self.head_position))
            .chain(std::iter::once(&self.head_rotation))
            .chain(std::iter::once(&self.head_scale))
    }

    /// Mutable variant of [`DeformationField::layers`].
    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Linear> {
        self.trunk
            .iter_mut()
            .chain(std::iter::once(&mut self.head_position))
            .chain(std::iter::once(&mut self.head_rotation))
            .chain(std::iter::once(&mut self.head_scale))
    }

    /// Total number of scalar weights across all layers.
    pub fn weight_count(&self) -> usize {
        self.layers().map(Linear::param_count).sum()
    }

    /// Adds `other`'s parameters element-wise (used for gradient merging).
    pub fn add_assign(&mut self, other: &DeformationField) {
        for (a, b) in self.layers_mut().zip(other.layers()) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    /// Runs the MLP for one encoded feature vector. Returns the hidden
    /// activations (post-ReLU, one slice per trunk layer) and the three head
    /// outputs.
    fn run(&self, feature: &[f64]) -> (Vec<Vec<f64>>, [f64; 3], [f64; 4], [f64; 3]) {
        let mut hidden = Vec::with_capacity(self.trunk.len());
        let mut input: &[f64] = feature;
        for layer in &self.trunk {
            let mut h = vec![0.0; layer.out_dim];
            layer.forward(input, &mut h);
            for v in &mut h {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            hidden.push(h);
            input = hidden.last().expect("just pushed");
        }
        let mut dx = [0.0; 3];
        let mut dq = [0.0; 4];
        let mut dl = [0.0; 3];
        self.head_position.forward(input, &mut dx);
        self.head_rotation.forward(input, &mut dq);
        self.head_scale.forward(input, &mut dl);
        (hidden, dx, dq, dl)
    }

    /// Deforms the whole set to time `t`. The returned state carries the
    /// caches needed by [`DeformationField::deform_backward`].
    pub fn deform(&self, set: &GaussianSet, t: f64) -> Result<DeformedState> {
        let n = set.len();
        let flen = self.config.feature_len();
        let chunks: Vec<(usize, usize)> = chunk_ranges(n);
        let partials: Vec<Result<ChunkState>> = chunks
            .par_iter()
            .map(|&(start, end)| {
                let mut cs = ChunkState::with_capacity(end - start, flen);
                let mut feature = vec![0.0; flen];
                for i in start..end {
                    encode_into(&self.config, &set.positions[i], t, &mut feature);
                    let (hidden, dx, dq, dl) = self.run(&feature);
                    let q = &set.rotations[i];
                    let raw = [q[0] + dq[0], q[1] + dq[1], q[2] + dq[2], q[3] + dq[3]];
                    let norm = quaternion_norm(&raw);
                    if !(norm >= ROTATION_NORM_FLOOR) {
                        return Err(Error::DegenerateRotation { index: i, norm });
                    }
                    cs.positions.push(set.positions[i] + Vector3::new(dx[0], dx[1], dx[2]));
                    cs.rotations.push([raw[0] / norm, raw[1] / norm, raw[2] / norm, raw[3] / norm]);
                    cs.scales.push((set.log_scales[i] + Vector3::new(dl[0], dl[1], dl[2])).map(f64::exp));
                    cs.features.extend_from_slice(&feature);
                    cs.hidden.push(hidden);
                    cs.raw_norms.push(norm);
                }
                Ok(cs)
            })
            .collect();

        let mut state = DeformedState {
            positions: Vec::with_capacity(n),
            rotations: Vec::with_capacity(n),
            scales: Vec::with_capacity(n),
            cache: Some(DeformCache {
                time: t,
                features: Vec::with_capacity(n * flen),
                hidden: Vec::with_capacity(n),
                raw_norms: Vec::with_capacity(n),
            }),
        };
        for partial in partials {
            let cs = partial?;
            state.positions.extend(cs.positions);
            state.rotations.extend(cs.rotations);
            state.scales.extend(cs.scales);
            let cache = state.cache.as_mut().expect("cache just created");
            cache.features.extend(cs.features);
            cache.hidden.extend(cs.hidden);
            cache.raw_norms.extend(cs.raw_norms);
        }
        Ok(state)
    }

    /// Backward pass: chains upstream gradients on the deformed state
    /// (means, unit quaternions, scales) to the canonical parameters and the
    /// MLP weights. Requires the cache produced by
    /// [`DeformationField::deform`].
    pub fn deform_backward(
        &self,
        set: &GaussianSet,
        state: &DeformedState,
        upstream: &DeformUpstream,
    ) -> Result<DeformGradients> {
        let n = set.len();
        if state.positions.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "deformed state holds {} Gaussians, set holds {n}",
                state.positions.len()
            )));
        }
        if upstream.positions.len() != n
            || upstream.rotations.len() != n
            || upstream.scales.len() != n
        {
            return Err(Error::ShapeMismatch("upstream gradient arrays must match N".into()));
        }
        let cache = state
            .cache
            .as_ref()
            .ok_or_else(|| Error::Usage("deform_backward requires the forward cache".into()))?;
        let flen = self.config.feature_len();

        let chunks: Vec<(usize, usize)> = chunk_ranges(n);
        let partials: Vec<ChunkGrads> = chunks
            .par_iter()
            .map(|&(start, end)| {
                let mut cg = ChunkGrads {
                    positions: Vec::with_capacity(end - start),
                    rotations: Vec::with_capacity(end - start),
                    log_scales: Vec::with_capacity(end - start),
                    field: self.zeros_like(),
                };
                let mut dfeat = vec![0.0; flen];
                for i in start..end {
                    let feature = &cache.features[i * flen..(i + 1) * flen];
                    let hidden = &cache.hidden[i];
                    let s = &state.scales[i];

                    // Scale path: s = exp(l + dl)  =>  d(l + dl) = ds * s.
                    let dl = Vector3::new(
                        upstream.scales[i].x * s.x,
                        upstream.scales[i].y * s.y,
                        upstream.scales[i].z * s.z,
                    );

                    // Rotation path through normalization:
                    // qhat = v / |v|, dv = (dqhat - qhat <qhat, dqhat>) / |v|.
                    let qhat = &state.rotations[i];
                    let dqhat = &upstream.rotations[i];
                    let norm = cache.raw_norms[i];
                    let dot = qhat[0] * dqhat[0]
                        + qhat[1] * dqhat[1]
                        + qhat[2] * dqhat[2]
                        + qhat[3] * dqhat[3];
                    let dv = [
                        (dqhat[0] - qhat[0] * dot) / norm,
                        (dqhat[1] - qhat[1] * dot) / norm,
                        (dqhat[2] - qhat[2] * dot) / norm,
                        (dqhat[3] - qhat[3] * dot) / norm,
                    ];

                    let dmu = upstream.positions[i];

                    // Heads: gradient w.r.t. the last hidden activation.
                    let last = hidden.last().map(Vec::as_slice).unwrap_or(feature);
                    let mut dlast = vec![0.0; last.len()];
                    self.head_position.backward(
                        last,
                        &[dmu.x, dmu.y, dmu.z],
                        &mut cg.field.head_position,
                        &mut dlast,
                    );
                    self.head_rotation.backward(last, &dv, &mut cg.field.head_rotation, &mut dlast);
                    self.head_scale.backward(
                        last,
                        &[dl.x, dl.y, dl.z],
                        &mut cg.field.head_scale,
                        &mut dlast,
                    );

                    // Trunk, last layer to first; ReLU mask from stored
                    // post-activations.
                    let mut dout = dlast;
                    for (li, layer) in self.trunk.iter().enumerate().rev() {
                        for (d, &h) in dout.iter_mut().zip(&hidden[li]) {
                            if h <= 0.0 {
                                *d = 0.0;
                            }
                        }
                        let input: &[f64] =
                            if li == 0 { feature } else { &hidden[li - 1] };
                        let mut dinput = vec![0.0; input.len()];
                        layer.backward(input, &dout, &mut cg.field.trunk[li], &mut dinput);
                        dout = dinput;
                    }
                    dfeat.copy_from_slice(&dout);

                    // Canonical parameter gradients: identity paths plus the
                    // encoding path into the MLP.
                    let mut dx = dmu;
                    encode_backward(&self.config, &dfeat, feature, &mut dx);
                    cg.positions.push(dx);
                    cg.rotations.push(dv);
                    cg.log_scales.push(dl);
                }
                cg
            })
            .collect();

        let mut grads = DeformGradients {
            positions: Vec::with_capacity(n),
            rotations: Vec::with_capacity(n),
            log_scales: Vec::with_capacity(n),
            field: self.zeros_like(),
        };
        for cg in partials {
            grads.positions.extend(cg.positions);
            grads.rotations.extend(cg.rotations);
            grads.log_scales.extend(cg.log_scales);
            grads.field.add_assign(&cg.field);
        }
        Ok(grads)
    }
}

fn chunk_ranges(n: usize) -> Vec<(usize, usize)> {
    (0..n.div_ceil(CHUNK).max(1))
        .map(|c| (c * CHUNK, ((c + 1) * CHUNK).min(n)))
        .filter(|(s, e)| e > s || n == 0)
        .collect()
}

struct ChunkState {
    positions: Vec<Vector3<f64>>,
    rotations: Vec<[f64; 4]>,
    scales: Vec<Vector3<f64>>,
    features: Vec<f64>,
    hidden: Vec<Vec<Vec<f64>>>,
    raw_norms: Vec<f64>,
}

impl ChunkState {
    fn with_capacity(n: usize, flen: usize) -> Self {
        ChunkState {
            positions: Vec::with_capacity(n),
            rotations: Vec::with_capacity(n),
            scales: Vec::with_capacity(n),
            features: Vec::with_capacity(n * flen),
            hidden: Vec::with_capacity(n),
            raw_norms: Vec::with_capacity(n),
        }
    }
}

struct ChunkGrads {
    positions: Vec<Vector3<f64>>,
    rotations: Vec<[f64; 4]>,
    log_scales: Vec<Vector3<f64>>,
    field: DeformationField,
}

/// Deformed per-Gaussian state at a fixed time.
#[derive(Debug, Clone)]
pub struct DeformedState {
    /// Deformed means `x + dx`.
    pub positions: Vec<Vector3<f64>>,
    /// Unit quaternions `normalize(q + dq)`, `(w, x, y, z)`.
    pub rotations: Vec<[f64; 4]>,
    /// Deformed world scales `exp(l + dl)`.
    pub scales: Vec<Vector3<f64>>,
    pub(crate) cache: Option<DeformCache>,
}

impl DeformedState {
    /// Time the cache was built for, if present.
    pub fn time(&self) -> Option<f64> {
        self.cache.as_ref().map(|c| c.time)
    }

    /// Drops the backward cache (used by display-only render paths).
    pub fn without_cache(mut self) -> Self {
        self.cache = None;
        self
    }
}

#[derive(Debug, Clone)]
pub(crate) struct DeformCache {
    pub time: f64,
    /// Encoded features, `N x feature_len` row-major.
    pub features: Vec<f64>,
    /// Post-ReLU activations per trunk layer, per Gaussian.
    pub hidden: Vec<Vec<Vec<f64>>>,
    /// `|q + dq|` per Gaussian.
    pub raw_norms: Vec<f64>,
}

/// Upstream gradients on the deformed state.
#[derive(Debug, Clone)]
pub struct DeformUpstream {
    pub positions: Vec<Vector3<f64>>,
    /// Gradients w.r.t. the *unit* quaternion coefficients.
    pub rotations: Vec<[f64; 4]>,
    pub scales: Vec<Vector3<f64>>,
}

impl DeformUpstream {
    /// All-zero upstream for `n` Gaussians.
    pub fn zeros(n: usize) -> Self {
        DeformUpstream {
            positions: vec![Vector3::zeros(); n],
            rotations: vec![[0.0; 4]; n],
            scales: vec![Vector3::zeros(); n],
        }
    }
}

/// Gradients produced by the deformation backward pass.
#[derive(Debug, Clone)]
pub struct DeformGradients {
    /// d/d(canonical means).
    pub positions: Vec<Vector3<f64>>,
    /// d/d(canonical quaternion coefficients).
    pub rotations: Vec<[f64; 4]>,
    /// d/d(log-scales).
    pub log_scales: Vec<Vector3<f64>>,
    /// d/d(MLP weights), stored in a same-shaped field.
    pub field: DeformationField,
}
