//! Differentiable EWA splatting of color and instance-marginal maps.
//!
//! Deformed Gaussians are projected through the pinhole Jacobian to 2D
//! covariances (`cov' = J W cov W^T J^T + 0.3 I`), culled against the near
//! plane and a 3-sigma image test, depth-sorted (ties broken by Gaussian
//! index), and composited front-to-back twice per pixel:
//!
//! - photometric: `C = sum_i T_i alpha_i P_i c_i`, `T_i = prod_{j<i} (1 - alpha_j P_j)`
//! - instance:    `M_k = sum_i T'_i pi_i P_i p_i^k`, `T'_i = prod_{j<i} (1 - pi_j P_j)`
//!
//! with `P_i` the unnormalized peak-1 kernel. Both paths share the skip
//! rules: terms below [`crate::SKIP_THRESHOLD`] are skipped and a path stops
//! once its transmittance drops below [`crate::TRANSMITTANCE_FLOOR`]. The
//! instance residual `R` is the final instance transmittance, so
//! `sum_k M_k + R = 1` holds per pixel by construction.
//!
//! [`render`] is the tiled production path; [`render_reference`] is a
//! deliberately independent brute-force compositor kept as the
//! differential-testing oracle; [`render_backward`] is the analytic adjoint
//! of [`render`].

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::camera::Camera;
use crate::deform::{DeformationField, DeformUpstream, DeformedState};
use crate::error::{Error, Result};
use crate::gaussians::{quaternion_to_matrix, GaussianSet};
use crate::params::Gradients;
use crate::{NEAR_PLANE, SCREEN_DILATION, SKIP_THRESHOLD, TRANSMITTANCE_FLOOR};

/// Pixels per tile edge in the production rasterizer.
const TILE: usize = 16;

/// A Gaussian projected to the image plane.
#[derive(Debug, Clone)]
pub struct Splat2D {
    /// Index of the source Gaussian in the set.
    pub gaussian: usize,
    /// Projected mean in pixel coordinates (pixel centers at `i + 0.5`).
    pub mean: Vector2<f64>,
    /// Camera-space depth.
    pub depth: f64,
    /// Projected 2D covariance including the screen dilation term.
    pub cov: Matrix2<f64>,
    /// Entries of `cov^{-1}` (symmetric): xx, xy, yy.
    pub inv_xx: f64,
    pub inv_xy: f64,
    pub inv_yy: f64,
    /// `sigmoid(opacity_logit)`.
    pub opacity: f64,
    /// `sigmoid(occupancy_logit)`.
    pub occupancy: f64,
    pub color: Vector3<f64>,
    /// Half-widths of the axis-aligned box outside which both `alpha * P`
    /// and `pi * P` are below the skip threshold (includes a half-pixel
    /// margin); negative when the splat can never pass the threshold.
    pub influence: Vector2<f64>,
}

/// Projects the deformed set through `camera`, culling Gaussians behind the
/// near plane or whose 3-sigma ellipse misses the image. The result stays
/// ordered by Gaussian index.
pub fn project(
    set: &GaussianSet,
    field: &DeformationField,
    camera: &Camera,
    t: f64,
) -> Result<Vec<Splat2D>> {
    let state = field.deform(set, t)?;
    Ok(project_deformed(set, &state, camera))
}

pub(crate) fn project_deformed(
    set: &GaussianSet,
    state: &DeformedState,
    camera: &Camera,
) -> Vec<Splat2D> {
    let n = set.len();
    let chunk = 512;
    let ranges: Vec<(usize, usize)> = (0..n.div_ceil(chunk))
        .map(|c| (c * chunk, ((c + 1) * chunk).min(n)))
        .collect();
    let chunks: Vec<Vec<Splat2D>> = ranges
        .par_iter()
        .map(|&(start, end)| {
            (start..end)
                .filter_map(|i| project_one(set, state, camera, i))
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    for c in chunks {
        out.extend(c);
    }
    out
}

fn project_one(
    set: &GaussianSet,
    state: &DeformedState,
    camera: &Camera,
    i: usize,
) -> Option<Splat2D> {
    let x_cam = camera.to_camera(&state.positions[i]);
    let z = x_cam.z;
    if z <= NEAR_PLANE {
        return None;
    }
    let u = camera.fx * x_cam.x / z + camera.cx;
    let v = camera.fy * x_cam.y / z + camera.cy;

    let rot = quaternion_to_matrix(&state.rotations[i]);
    let s = &state.scales[i];
    let cov_world = crate::gaussians::covariance_from(&rot, s);
    let cov_cam = camera.rotation() * cov_world * camera.rotation().transpose();
    let j = pinhole_jacobian(camera, &x_cam);
    let mut cov2 = j * cov_cam * j.transpose();
    cov2[(0, 0)] += SCREEN_DILATION;
    cov2[(1, 1)] += SCREEN_DILATION;

    // 3-sigma cull against the image rectangle (axis-aligned ellipse bounds).
    let sx = cov2[(0, 0)].sqrt();
    let sy = cov2[(1, 1)].sqrt();
    let (w, h) = (camera.width as f64, camera.height as f64);
    if u + 3.0 * sx <= 0.0 || u - 3.0 * sx >= w || v + 3.0 * sy <= 0.0 || v - 3.0 * sy >= h {
        return None;
    }

    let det = cov2[(0, 0)] * cov2[(1, 1)] - cov2[(0, 1)] * cov2[(0, 1)];
    let inv_xx = cov2[(1, 1)] / det;
    let inv_xy = -cov2[(0, 1)] / det;
    let inv_yy = cov2[(0, 0)] / det;

    let opacity = set.opacity(i);
    let occupancy = set.occupancy(i);
    let reach = opacity.max(occupancy);
    let influence = if reach > SKIP_THRESHOLD {
        let r = (2.0 * (reach / SKIP_THRESHOLD).ln()).sqrt();
        Vector2::new(r * sx + 0.5, r * sy + 0.5)
    } else {
        Vector2::new(-1.0, -1.0)
    };

    Some(Splat2D {
        gaussian: i,
        mean: Vector2::new(u, v),
        depth: z,
        cov: cov2,
        inv_xx,
        inv_xy,
        inv_yy,
        opacity,
        occupancy,
        color: set.colors[i],
        influence,
    })
}

fn pinhole_jacobian(camera: &Camera, x_cam: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
    let z = x_cam.z;
    nalgebra::Matrix2x3::new(
        camera.fx / z,
        0.0,
        -camera.fx * x_cam.x / (z * z),
        0.0,
        camera.fy / z,
        -camera.fy * x_cam.y / (z * z),
    )
}

/// Forward-render outputs. Marginals are stored pixel-major: entry
/// `pixel * K + (k-1)` is the mass of instance `k` at `pixel`.
#[derive(Debug, Clone)]
pub struct RenderBuffers {
    pub width: usize,
    pub height: usize,
    pub instances: usize,
    /// RGB image, `H*W*3`, row-major, channels interleaved.
    pub color: Vec<f64>,
    /// Instance marginal mass per pixel, `H*W*K`, pixel-major.
    pub marginals: Vec<f64>,
    /// Instance-path residual (final instance transmittance), `H*W`.
    pub residual: Vec<f64>,
    /// Final photometric transmittance, `H*W`.
    pub photo_transmittance: Vec<f64>,
    /// Per-pixel normalized rendering weights `(gaussian, w)`, present when
    /// requested via [`RenderOptions::contributions`].
    pub contributions: Option<Vec<Vec<(u32, f64)>>>,
    pub(crate) cache: Option<ForwardCache>,
}

impl RenderBuffers {
    /// Marginal mass of instance `k` (1-based) at pixel index `idx`.
    pub fn marginal(&self, k: usize, idx: usize) -> f64 {
        debug_assert!(k >= 1 && k <= self.instances);
        self.marginals[idx * self.instances + (k - 1)]
    }

    /// Number of pixels.
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// True when the buffers can feed [`render_backward`].
    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    pub state: DeformedState,
    pub splats: Vec<Splat2D>,
    /// Calibrated identities per visible splat, `S * K`.
    pub identities: Vec<f64>,
    /// Identity normalizers `Z_i = sum_k p_hat_i^k exp(lambda_i^k)`.
    pub ident_norms: Vec<f64>,
    /// Indices into `splats`, sorted by (depth, gaussian index).
    pub order: Vec<usize>,
}

/// Rendering options.
#[derive(Debug, Clone, Copy)]
pub struct RenderOptions {
    /// Record per-pixel normalized contribution lists (identity estimation).
    pub contributions: bool,
    /// Keep the forward cache required by [`render_backward`]. Display-only
    /// callers can drop it to save memory.
    pub cache: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions { contributions: false, cache: true }
    }
}

fn depth_order(splats: &[Splat2D]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        splats[a]
            .depth
            .total_cmp(&splats[b].depth)
            .then(splats[a].gaussian.cmp(&splats[b].gaussian))
    });
    order
}

/// Calibrated identities and normalizers for the visible splats.
fn splat_identities(set: &GaussianSet, splats: &[Splat2D]) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = set.instance_count;
    let mut identities = Vec::with_capacity(splats.len() * k);
    let mut norms = Vec::with_capacity(splats.len());
    for s in splats {
        let i = s.gaussian;
        let p_hat = set.base_identity_row(i);
        let lambda = set.calibration_row(i);
        let mut z = 0.0;
        let base = identities.len();
        for (p, l) in p_hat.iter().zip(lambda) {
            let u = p * l.exp();
            identities.push(u);
            z += u;
        }
        if !(z > 0.0) || !z.is_finite() {
            return Err(Error::DegenerateDistribution { index: i, normalizer: z });
        }
        for v in &mut identities[base..] {
            *v /= z;
        }
        norms.push(z);
    }
    Ok((identities, norms))
}

/// Tile lists: per tile, indices into `splats` in depth order.
fn bin_tiles(splats: &[Splat2D], order: &[usize], width: usize, height: usize) -> Vec<Vec<u32>> {
    let tw = width.div_ceil(TILE);
    let th = height.div_ceil(TILE);
    let mut tiles = vec![Vec::new(); tw * th];
    for &si in order {
        let s = &splats[si];
        if s.influence.x < 0.0 {
            continue;
        }
        let x0 = ((s.mean.x - s.influence.x) / TILE as f64).floor() as i64;
        let x1 = ((s.mean.x + s.influence.x) / TILE as f64).floor() as i64;
        let y0 = ((s.mean.y - s.influence.y) / TILE as f64).floor() as i64;
        let y1 = ((s.mean.y + s.influence.y) / TILE as f64).floor() as i64;
        // The 3-sigma cull guarantees the influence box overlaps the image,
        // so clamping keeps a non-empty range.
        let x0 = x0.clamp(0, tw as i64 - 1) as usize;
        let x1 = x1.clamp(0, tw as i64 - 1) as usize;
        let y0 = y0.clamp(0, th as i64 - 1) as usize;
        let y1 = y1.clamp(0, th as i64 - 1) as usize;
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                tiles[ty * tw + tx].push(si as u32);
            }
        }
    }
    tiles
}

/// Renders color, instance marginals, residual and transmittance maps.
pub fn render(
    set: &GaussianSet,
    field: &DeformationField,
    camera: &Camera,
    t: f64,
    options: RenderOptions,
) -> Result<RenderBuffers> {
    let state = field.deform(set, t)?;
    render_from_state(set, state, camera, options)
}

pub(crate) fn render_from_state(
    set: &GaussianSet,
    state: DeformedState,
    camera: &Camera,
    options: RenderOptions,
) -> Result<RenderBuffers> {
    let (w, h, k) = (camera.width, camera.height, set.instance_count);
    let splats = project_deformed(set, &state, camera);
    let (identities, ident_norms) = splat_identities(set, &splats)?;
    let order = depth_order(&splats);
    let tiles = bin_tiles(&splats, &order, w, h);
    let tw = w.div_ceil(TILE);

    let mut color = vec![0.0; w * h * 3];
    let mut marginals = vec![0.0; w * h * k];
    let mut residual = vec![0.0; w * h];
    let mut photo_transmittance = vec![0.0; w * h];
    // Allocated unconditionally (empty inner vectors are cheap) so the band
    // zip below has a uniform shape; dropped at the end unless requested.
    let mut contributions: Vec<Vec<(u32, f64)>> = vec![Vec::new(); w * h];

    // One band per tile row; bands own disjoint row ranges of every buffer,
    // so the parallel fill is deterministic at any worker count.
    let band_rows = TILE;
    color
        .par_chunks_mut(band_rows * w * 3)
        .zip(marginals.par_chunks_mut(band_rows * w * k))
        .zip(residual.par_chunks_mut(band_rows * w))
        .zip(photo_transmittance.par_chunks_mut(band_rows * w))
        .zip(contributions.par_chunks_mut(band_rows * w))
        .enumerate()
        .for_each(|(ty, ((((c_band, m_band), r_band), t_band), cb_band))| {
            let y_start = ty * band_rows;
            let rows = r_band.len() / w;
            let mut raw: Vec<(u32, f64)> = Vec::new();
            for row in 0..rows {
                let py = (y_start + row) as f64 + 0.5;
                for ix in 0..w {
                    let px = ix as f64 + 0.5;
                    let list = &tiles[ty * tw + ix / TILE];
                    let idx = row * w + ix;
                    let c = &mut c_band[idx * 3..idx * 3 + 3];
                    let m = &mut m_band[idx * k..idx * k + k];
                    raw.clear();
                    let mut t_rgb = 1.0;
                    let mut t_inst = 1.0;
                    for &si in list.iter() {
                        if t_rgb < TRANSMITTANCE_FLOOR && t_inst < TRANSMITTANCE_FLOOR {
                            break;
                        }
                        let s = &splats[si as usize];
                        let dx = px - s.mean.x;
                        let dy = py - s.mean.y;
                        let e = -0.5
                            * (s.inv_xx * dx * dx
                                + 2.0 * s.inv_xy * dx * dy
                                + s.inv_yy * dy * dy);
                        let p = e.exp();
                        if t_rgb >= TRANSMITTANCE_FLOOR {
                            let a = s.opacity * p;
                            if a >= SKIP_THRESHOLD {
                                let wgt = t_rgb * a;
                                c[0] += wgt * s.color.x;
                                c[1] += wgt * s.color.y;
                                c[2] += wgt * s.color.z;
                                if options.contributions {
                                    raw.push((s.gaussian as u32, wgt));
                                }
                                t_rgb *= 1.0 - a;
                            }
                        }
                        if t_inst >= TRANSMITTANCE_FLOOR {
                            let g = s.occupancy * p;
                            if g >= SKIP_THRESHOLD {
                                let wgt = t_inst * g;
                                let prow =
                                    &identities[si as usize * k..si as usize * k + k];
                                for (mk, &pk) in m.iter_mut().zip(prow) {
                                    *mk += wgt * pk;
                                }
                                t_inst *= 1.0 - g;
                            }
                        }
                    }
                    r_band[idx] = t_inst;
                    t_band[idx] = t_rgb;
                    if options.contributions {
                        let total: f64 = raw.iter().map(|&(_, w)| w).sum();
                        if total > 0.0 {
                            cb_band[idx] =
                                raw.iter().map(|&(g, w)| (g, w / total)).collect();
                        }
                    }
                }
            }
        });

    Ok(RenderBuffers {
        width: w,
        height: h,
        instances: k,
        color,
        marginals,
        residual,
        photo_transmittance,
        contributions: options.contributions.then_some(contributions),
        cache: options.cache.then(|| ForwardCache {
            state,
            splats,
            identities,
            ident_norms,
            order,
        }),
    })
}

/// Brute-force reference compositor: full per-pixel loop over depth-sorted
/// splats, no tiles, no influence boxes, its own inverse and accumulation
/// code. Shares only [`project`] (tested separately against closed forms)
/// with the production path; used as the differential-testing oracle.
pub fn render_reference(
    set: &GaussianSet,
    field: &DeformationField,
    camera: &Camera,
    t: f64,
    options: RenderOptions,
) -> Result<RenderBuffers> {
    let (w, h, k) = (camera.width, camera.height, set.instance_count);
    let state = field.deform(set, t)?;
    let splats = project_deformed(set, &state, camera);

    // Independent depth sort (ties by Gaussian index).
    let mut sorted: Vec<usize> = (0..splats.len()).collect();
    sorted.sort_by(|&a, &b| {
        splats[a]
            .depth
            .partial_cmp(&splats[b].depth)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| splats[a].gaussian.cmp(&splats[b].gaussian))
    });

    // Independent identity computation.
    let mut identities = vec![0.0; splats.len() * k];
    let mut ident_norms = vec![0.0; splats.len()];
    for (si, s) in splats.iter().enumerate() {
        let p_hat = set.base_identity_row(s.gaussian);
        let lambda = set.calibration_row(s.gaussian);
        let mut z = 0.0;
        for kk in 0..k {
            let u = p_hat[kk] * lambda[kk].exp();
            identities[si * k + kk] = u;
            z += u;
        }
        if !(z > 0.0) || !z.is_finite() {
            return Err(Error::DegenerateDistribution { index: s.gaussian, normalizer: z });
        }
        for kk in 0..k {
            identities[si * k + kk] /= z;
        }
        ident_norms[si] = z;
    }

    // Independent per-splat inverse covariances.
    let inverses: Vec<(f64, f64, f64)> = splats
        .iter()
        .map(|s| {
            let (a, b, d) = (s.cov[(0, 0)], s.cov[(0, 1)], s.cov[(1, 1)]);
            let det = a * d - b * b;
            (d / det, -b / det, a / det)
        })
        .collect();

    let mut color = vec![0.0; w * h * 3];
    let mut marginals = vec![0.0; w * h * k];
    let mut residual = vec![0.0; w * h];
    let mut photo_transmittance = vec![0.0; w * h];
    let mut contributions: Vec<Vec<(u32, f64)>> = vec![Vec::new(); w * h];

    for iy in 0..h {
        for ix in 0..w {
            let (px, py) = (ix as f64 + 0.5, iy as f64 + 0.5);
            let idx = iy * w + ix;
            let mut t_rgb = 1.0;
            let mut t_inst = 1.0;
            let mut raw: Vec<(u32, f64)> = Vec::new();
            for &si in &sorted {
                if t_rgb < TRANSMITTANCE_FLOOR && t_inst < TRANSMITTANCE_FLOOR {
                    break;
                }
                let s = &splats[si];
                let (ixx, ixy, iyy) = inverses[si];
                let (dx, dy) = (px - s.mean.x, py - s.mean.y);
                let p = (-0.5 * (ixx * dx * dx + 2.0 * ixy * dx * dy + iyy * dy * dy)).exp();
                if t_rgb >= TRANSMITTANCE_FLOOR {
                    let a = s.opacity * p;
                    if a >= SKIP_THRESHOLD {
                        let wgt = t_rgb * a;
                        color[idx * 3] += wgt * s.color.x;
                        color[idx * 3 + 1] += wgt * s.color.y;
                        color[idx * 3 + 2] += wgt * s.color.z;
                        raw.push((s.gaussian as u32, wgt));
                        t_rgb *= 1.0 - a;
                    }
                }
                if t_inst >= TRANSMITTANCE_FLOOR {
                    let g = s.occupancy * p;
                    if g >= SKIP_THRESHOLD {
                        let wgt = t_inst * g;
                        for kk in 0..k {
                            marginals[idx * k + kk] += wgt * identities[si * k + kk];
                        }
                        t_inst *= 1.0 - g;
                    }
                }
            }
            residual[idx] = t_inst;
            photo_transmittance[idx] = t_rgb;
            let total: f64 = raw.iter().map(|&(_, wgt)| wgt).sum();
            if total > 0.0 {
                contributions[idx] = raw.into_iter().map(|(g, wgt)| (g, wgt / total)).collect();
            }
        }
    }

    let order = depth_order(&splats);
    Ok(RenderBuffers {
        width: w,
        height: h,
        instances: k,
        color,
        marginals,
        residual,
        photo_transmittance,
        contributions: options.contributions.then_some(contributions),
        cache: options.cache.then(|| ForwardCache {
            state,
            splats,
            identities,
            ident_norms,
            order,
        }),
    })
}

/// Upstream adjoints for [`render_backward`], matching the forward buffer
/// layouts (`d_color`: `H*W*3`; `d_marginals`: `H*W*K` pixel-major;
/// `d_residual`: `H*W`).
#[derive(Debug, Clone)]
pub struct RenderUpstream {
    pub d_color: Vec<f64>,
    pub d_marginals: Vec<f64>,
    pub d_residual: Vec<f64>,
}

impl RenderUpstream {
    /// All-zero upstream for a `w x h x K` render.
    pub fn zeros(width: usize, height: usize, instances: usize) -> Self {
        RenderUpstream {
            d_color: vec![0.0; width * height * 3],
            d_marginals: vec![0.0; width * height * instances],
            d_residual: vec![0.0; width * height],
        }
    }
}

#[derive(Clone)]
struct PixelTerm {
    si: u32,
    kernel: f64,
    /// `(alpha * P, transmittance before this term)` when the photometric
    /// path accumulated it.
    rgb: Option<(f64, f64)>,
    /// Same for the instance path with `pi * P`.
    inst: Option<(f64, f64)>,
}

/// Per-splat gradient accumulators in image space.
struct SplatGrads {
    mean: Vec<Vector2<f64>>,
    inv: Vec<[f64; 3]>,
    alpha: Vec<f64>,
    pi: Vec<f64>,
    color: Vec<Vector3<f64>>,
    ident: Vec<f64>,
}

impl SplatGrads {
    fn zeros(splats: usize, k: usize) -> Self {
        SplatGrads {
            mean: vec![Vector2::zeros(); splats],
            inv: vec![[0.0; 3]; splats],
            alpha: vec![0.0; splats],
            pi: vec![0.0; splats],
            color: vec![Vector3::zeros(); splats],
            ident: vec![0.0; splats * k],
        }
    }

    fn add_assign(&mut self, other: &SplatGrads) {
        for (a, b) in self.mean.iter_mut().zip(&other.mean) {
            *a += b;
        }
        for (a, b) in self.inv.iter_mut().zip(&other.inv) {
            a[0] += b[0];
            a[1] += b[1];
            a[2] += b[2];
        }
        for (a, b) in self.alpha.iter_mut().zip(&other.alpha) {
            *a += b;
        }
        for (a, b) in self.pi.iter_mut().zip(&other.pi) {
            *a += b;
        }
        for (a, b) in self.color.iter_mut().zip(&other.color) {
            *a += b;
        }
        for (a, b) in self.ident.iter_mut().zip(&other.ident) {
            *a += b;
        }
    }
}

/// Analytic adjoint of [`render`]: chains upstream gradients on the output
/// maps back to every packed parameter. Requires buffers rendered with
/// [`RenderOptions::cache`] enabled.
pub fn render_backward(
    set: &GaussianSet,
    field: &DeformationField,
    camera: &Camera,
    buffers: &RenderBuffers,
    upstream: &RenderUpstream,
) -> Result<Gradients> {
    let cache = buffers
        .cache
        .as_ref()
        .ok_or_else(|| Error::Usage("render_backward requires buffers rendered with cache enabled".into()))?;
    let (w, h, k) = (buffers.width, buffers.height, buffers.instances);
    if camera.width != w || camera.height != h {
        return Err(Error::ShapeMismatch(format!(
            "camera is {}x{}, buffers are {w}x{h}",
            camera.width, camera.height
        )));
    }
    if set.instance_count != k || cache.state.positions.len() != set.len() {
        return Err(Error::ShapeMismatch(
            "buffers were rendered from a differently-shaped set".into(),
        ));
    }
    if upstream.d_color.len() != w * h * 3
        || upstream.d_marginals.len() != w * h * k
        || upstream.d_residual.len() != w * h
    {
        return Err(Error::ShapeMismatch("upstream adjoints do not match buffer shapes".into()));
    }

    let splats = &cache.splats;
    let tiles = bin_tiles(splats, &cache.order, w, h);
    let tw = w.div_ceil(TILE);
    let th = h.div_ceil(TILE);

    // Per-band image-space accumulation, merged in band order.
    let partials: Vec<SplatGrads> = (0..th)
        .into_par_iter()
        .map(|ty| {
            let mut pg = SplatGrads::zeros(splats.len(), k);
            let mut terms: Vec<PixelTerm> = Vec::new();
            let mut dp_term: Vec<f64> = Vec::new();
            let y_end = ((ty + 1) * TILE).min(h);
            for iy in ty * TILE..y_end {
                let py = iy as f64 + 0.5;
                for ix in 0..w {
                    let px = ix as f64 + 0.5;
                    let idx = iy * w + ix;
                    let list = &tiles[ty * tw + ix / TILE];

                    // Recompute the forward walk for this pixel.
                    terms.clear();
                    let mut t_rgb = 1.0;
                    let mut t_inst = 1.0;
                    for &si in list.iter() {
                        if t_rgb < TRANSMITTANCE_FLOOR && t_inst < TRANSMITTANCE_FLOOR {
                            break;
                        }
                        let s = &splats[si as usize];
                        let dx = px - s.mean.x;
                        let dy = py - s.mean.y;
                        let e = -0.5
                            * (s.inv_xx * dx * dx
                                + 2.0 * s.inv_xy * dx * dy
                                + s.inv_yy * dy * dy);
                        let p = e.exp();
                        let mut term =
                            PixelTerm { si, kernel: p, rgb: None, inst: None };
                        if t_rgb >= TRANSMITTANCE_FLOOR {
                            let a = s.opacity * p;
                            if a >= SKIP_THRESHOLD {
                                term.rgb = Some((a, t_rgb));
                                t_rgb *= 1.0 - a;
                            }
                        }
                        if t_inst >= TRANSMITTANCE_FLOOR {
                            let g = s.occupancy * p;
                            if g >= SKIP_THRESHOLD {
                                term.inst = Some((g, t_inst));
                                t_inst *= 1.0 - g;
                            }
                        }
                        if term.rgb.is_some() || term.inst.is_some() {
                            terms.push(term);
                        }
                    }

                    let dc = &upstream.d_color[idx * 3..idx * 3 + 3];
                    let dm = &upstream.d_marginals[idx * k..idx * k + k];
                    let dr = upstream.d_residual[idx];
                    dp_term.clear();
                    dp_term.resize(terms.len(), 0.0);

                    // Photometric path, back to front.
                    let mut suffix = [0.0f64; 3];
                    for (ti, term) in terms.iter().enumerate().rev() {
                        let Some((a, t_before)) = term.rgb else { continue };
                        let s = &splats[term.si as usize];
                        let wgt = t_before * a;
                        let g = &mut pg.color[term.si as usize];
                        g.x += dc[0] * wgt;
                        g.y += dc[1] * wgt;
                        g.z += dc[2] * wgt;
                        let da = dc[0] * (t_before * s.color.x - suffix[0] / (1.0 - a))
                            + dc[1] * (t_before * s.color.y - suffix[1] / (1.0 - a))
                            + dc[2] * (t_before * s.color.z - suffix[2] / (1.0 - a));
                        pg.alpha[term.si as usize] += da * term.kernel;
                        dp_term[ti] += da * s.opacity;
                        suffix[0] += wgt * s.color.x;
                        suffix[1] += wgt * s.color.y;
                        suffix[2] += wgt * s.color.z;
                    }

                    // Instance path, back to front. `downstream` carries
                    // d(loss)/d(mass behind term i), including the residual.
                    let mut downstream = dr * t_inst;
                    for (ti, term) in terms.iter().enumerate().rev() {
                        let Some((g, t_before)) = term.inst else { continue };
                        let s = &splats[term.si as usize];
                        let wgt = t_before * g;
                        let prow = &cache.identities
                            [term.si as usize * k..term.si as usize * k + k];
                        let mut dot = 0.0;
                        for kk in 0..k {
                            pg.ident[term.si as usize * k + kk] += dm[kk] * wgt;
                            dot += dm[kk] * prow[kk];
                        }
                        let dg = dot * t_before - downstream / (1.0 - g);
                        pg.pi[term.si as usize] += dg * term.kernel;
                        dp_term[ti] += dg * s.occupancy;
                        downstream += dot * wgt;
                    }

                    // Kernel path into projected mean / inverse covariance.
                    for (ti, term) in terms.iter().enumerate() {
                        let dp = dp_term[ti];
                        if dp == 0.0 {
                            continue;
                        }
                        let s = &splats[term.si as usize];
                        let de = dp * term.kernel;
                        let dx = px - s.mean.x;
                        let dy = py - s.mean.y;
                        let gm = &mut pg.mean[term.si as usize];
                        gm.x += de * (s.inv_xx * dx + s.inv_xy * dy);
                        gm.y += de * (s.inv_xy * dx + s.inv_yy * dy);
                        let gi = &mut pg.inv[term.si as usize];
                        gi[0] += de * (-0.5 * dx * dx);
                        gi[1] += de * (-dx * dy);
                        gi[2] += de * (-0.5 * dy * dy);
                    }
                }
            }
            pg
        })
        .collect();

    let mut acc = SplatGrads::zeros(splats.len(), k);
    for pg in &partials {
        acc.add_assign(pg);
    }

    // Chain image-space gradients to the deformed state and direct params.
    let mut grads = Gradients::zeros(set, field);
    let mut up_state = DeformUpstream::zeros(set.len());
    let chained: Vec<ChainOut> = (0..splats.len())
        .into_par_iter()
        .map(|si| chain_splat(set, camera, cache, si, &acc))
        .collect();
    for (si, out) in chained.into_iter().enumerate() {
        let gi = splats[si].gaussian;
        up_state.positions[gi] += out.d_mu;
        for c in 0..4 {
            up_state.rotations[gi][c] += out.d_qhat[c];
        }
        up_state.scales[gi] += out.d_scale;
        grads.colors[gi] += acc.color[si];
        let a = splats[si].opacity;
        grads.opacity_logits[gi] += acc.alpha[si] * a * (1.0 - a);
        let pi = splats[si].occupancy;
        grads.occupancy_logits[gi] += acc.pi[si] * pi * (1.0 - pi);
        for kk in 0..k {
            grads.base_identity[gi * k + kk] += out.d_p_hat[kk];
            grads.calibration[gi * k + kk] += out.d_lambda[kk];
        }
    }

    let dgrads = field.deform_backward(set, &cache.state, &up_state)?;
    grads.positions = dgrads.positions;
    grads.rotations = dgrads.rotations;
    grads.log_scales = dgrads.log_scales;
    grads.field = dgrads.field;
    Ok(grads)
}

struct ChainOut {
    d_mu: Vector3<f64>,
    d_qhat: [f64; 4],
    d_scale: Vector3<f64>,
    d_p_hat: Vec<f64>,
    d_lambda: Vec<f64>,
}

/// Chains one splat's image-space gradients through the EWA projection to
/// the deformed mean/rotation/scale and the identity parameters.
fn chain_splat(
    set: &GaussianSet,
    camera: &Camera,
    cache: &ForwardCache,
    si: usize,
    acc: &SplatGrads,
) -> ChainOut {
    let k = set.instance_count;
    let s = &cache.splats[si];
    let gi = s.gaussian;

    // Identity normalization chain: p = u / Z with u_k = p_hat_k m_k.
    let mut d_p_hat = vec![0.0; k];
    let mut d_lambda = vec![0.0; k];
    let dp = &acc.ident[si * k..si * k + k];
    if dp.iter().any(|&v| v != 0.0) {
        let prow = &cache.identities[si * k..si * k + k];
        let z = cache.ident_norms[si];
        let p_hat = set.base_identity_row(gi);
        let lambda = set.calibration_row(gi);
        let dot: f64 = dp.iter().zip(prow).map(|(&d, &p)| d * p).sum();
        for kk in 0..k {
            let du = (dp[kk] - dot) / z;
            let m = lambda[kk].exp();
            d_p_hat[kk] = du * m;
            d_lambda[kk] = du * p_hat[kk] * m;
        }
    }

    let dmean = acc.mean[si];
    let ginv = acc.inv[si];
    if dmean.x == 0.0 && dmean.y == 0.0 && ginv.iter().all(|&v| v == 0.0) {
        return ChainOut {
            d_mu: Vector3::zeros(),
            d_qhat: [0.0; 4],
            d_scale: Vector3::zeros(),
            d_p_hat,
            d_lambda,
        };
    }

    // inv -> cov (full symmetric chain): dCov = -Inv G Inv.
    let inv = Matrix2::new(s.inv_xx, s.inv_xy, s.inv_xy, s.inv_yy);
    let g_inv = Matrix2::new(ginv[0], ginv[1] / 2.0, ginv[1] / 2.0, ginv[2]);
    let d_cov = -(inv * g_inv * inv);

    // cov = J Sigma_cam J^T + dilation; Sigma_cam = W Sigma_world W^T.
    let state = &cache.state;
    let x_cam = camera.to_camera(&state.positions[gi]);
    let j = pinhole_jacobian(camera, &x_cam);
    let rot_w = camera.rotation();
    let rot_q = quaternion_to_matrix(&state.rotations[gi]);
    let scales = &state.scales[gi];
    let cov_world = crate::gaussians::covariance_from(&rot_q, scales);
    let cov_cam = rot_w * cov_world * rot_w.transpose();

    let d_sigma_cam: Matrix3<f64> = j.transpose() * d_cov * j;
    let d_j = 2.0 * d_cov * j * cov_cam;
    let d_sigma_world: Matrix3<f64> = rot_w.transpose() * d_sigma_cam * rot_w;

    // Sigma_world = Rq D Rq^T with D = diag(s^2).
    let d_mat = Matrix3::from_diagonal(&scales.map(|v| v * v));
    let d_rq = 2.0 * d_sigma_world * rot_q * d_mat;
    let rtr = rot_q.transpose() * d_sigma_world * rot_q;
    let d_scale = Vector3::new(
        2.0 * scales.x * rtr[(0, 0)],
        2.0 * scales.y * rtr[(1, 1)],
        2.0 * scales.z * rtr[(2, 2)],
    );
    let d_qhat = quaternion_matrix_backward(&state.rotations[gi], &d_rq);

    // Projection of the mean and the Jacobian entries into camera space.
    let z = x_cam.z;
    let (fx, fy) = (camera.fx, camera.fy);
    let mut d_cam = Vector3::new(
        dmean.x * fx / z,
        dmean.y * fy / z,
        -dmean.x * fx * x_cam.x / (z * z) - dmean.y * fy * x_cam.y / (z * z),
    );
    d_cam.x += d_j[(0, 2)] * (-fx / (z * z));
    d_cam.y += d_j[(1, 2)] * (-fy / (z * z));
    d_cam.z += d_j[(0, 0)] * (-fx / (z * z))
        + d_j[(0, 2)] * (2.0 * fx * x_cam.x / (z * z * z))
        + d_j[(1, 1)] * (-fy / (z * z))
        + d_j[(1, 2)] * (2.0 * fy * x_cam.y / (z * z * z));
    let d_mu = rot_w.transpose() * d_cam;

    ChainOut { d_mu, d_qhat, d_scale, d_p_hat, d_lambda }
}

/// Given `G = dL/dR` for the rotation matrix of a unit quaternion, returns
/// `dL/d(qhat)` using the closed-form partials of the rotation entries.
fn quaternion_matrix_backward(q: &[f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = *q;
    let dw = 2.0
        * (g[(0, 1)] * (-z)
            + g[(0, 2)] * y
            + g[(1, 0)] * z
            + g[(1, 2)] * (-x)
            + g[(2, 0)] * (-y)
            + g[(2, 1)] * x);
    let dx = 2.0
        * (g[(0, 1)] * y
            + g[(0, 2)] * z
            + g[(1, 0)] * y
            + g[(1, 1)] * (-2.0 * x)
            + g[(1, 2)] * (-w)
            + g[(2, 0)] * z
            + g[(2, 1)] * w
            + g[(2, 2)] * (-2.0 * x));
    let dy = 2.0
        * (g[(0, 0)] * (-2.0 * y)
            + g[(0, 1)] * x
            + g[(0, 2)] * w
            + g[(1, 0)] * x
            + g[(1, 2)] * z
            + g[(2, 0)] * (-w)
            + g[(2, 1)] * z
            + g[(2, 2)] * (-2.0 * y));
    let dz = 2.0
        * (g[(0, 0)] * (-2.0 * z)
            + g[(0, 1)] * (-w)
            + g[(0, 2)] * x
            + g[(1, 0)] * w
            + g[(1, 1)] * (-2.0 * z)
            + g[(1, 2)] * y
            + g[(2, 0)] * x
            + g[(2, 1)] * y);
    [dw, dx, dy, dz]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::DeformConfig;
    use crate::gaussians::{logit, IDENTITY_QUATERNION};
    use crate::params::{pack_parameters, unpack_parameters, ParamLayout};
    use crate::testgen;
    use approx::assert_relative_eq;

    fn single_gaussian_scene(
        opacity: f64,
        occupancy: f64,
        k: usize,
    ) -> (GaussianSet, DeformationField, Camera) {
        let mut set = GaussianSet::empty(k);
        set.push(
            Vector3::new(0.0, 0.0, 2.0),
            IDENTITY_QUATERNION,
            Vector3::new(0.1f64.ln(), 0.1f64.ln(), 0.1f64.ln()),
            Vector3::new(1.0, 0.0, 0.0),
            logit(opacity),
            logit(occupancy),
        );
        let field = DeformationField::zeros(&DeformConfig::small());
        let camera = Camera::axis_aligned(48.0, 48.0, 16.0, 16.0, 32, 32).unwrap();
        (set, field, camera)
    }

    #[test]
    fn on_axis_projection_matches_closed_form() {
        let (set, field, camera) = single_gaussian_scene(0.5, 0.5, 1);
        let splats = project(&set, &field, &camera, 0.0).unwrap();
        assert_eq!(splats.len(), 1);
        let s = &splats[0];
        assert_relative_eq!(s.mean.x, 16.0, max_relative = 1e-12);
        assert_relative_eq!(s.mean.y, 16.0, max_relative = 1e-12);
        assert_relative_eq!(s.depth, 2.0, max_relative = 1e-12);
        // Isotropic scale 0.1 at depth 2 with focal 48: sigma = 2.4 px.
        let expected = (48.0f64 * 0.1 / 2.0).powi(2) + SCREEN_DILATION;
        assert_relative_eq!(s.cov[(0, 0)], expected, max_relative = 1e-12);
        assert_relative_eq!(s.cov[(1, 1)], expected, max_relative = 1e-12);
        assert_relative_eq!(s.cov[(0, 1)], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn doubling_depth_halves_projected_extent() {
        let (mut set, field, camera) = single_gaussian_scene(0.5, 0.5, 1);
        let near = project(&set, &field, &camera, 0.0).unwrap()[0].clone();
        set.positions[0].z = 4.0;
        let far = project(&set, &field, &camera, 0.0).unwrap()[0].clone();
        let near_sigma = (near.cov[(0, 0)] - SCREEN_DILATION).sqrt();
        let far_sigma = (far.cov[(0, 0)] - SCREEN_DILATION).sqrt();
        assert_relative_eq!(near_sigma, 2.0 * far_sigma, max_relative = 1e-12);
    }

    #[test]
    fn culls_behind_near_plane_and_off_image() {
        let (mut set, field, camera) = single_gaussian_scene(0.5, 0.5, 1);
        set.positions[0].z = -1.0;
        assert!(project(&set, &field, &camera, 0.0).unwrap().is_empty());
        set.positions[0].z = 0.005;
        assert!(project(&set, &field, &camera, 0.0).unwrap().is_empty());
        // Far to the side: projected mean minus 3 sigma lies beyond the image.
        set.positions[0] = Vector3::new(5.0, 0.0, 2.0);
        assert!(project(&set, &field, &camera, 0.0).unwrap().is_empty());
        set.positions[0] = Vector3::new(0.0, 0.0, 2.0);
        assert_eq!(project(&set, &field, &camera, 0.0).unwrap().len(), 1);
    }

    #[test]
    fn depth_ties_break_by_gaussian_index() {
        let (mut set, field, camera) = single_gaussian_scene(0.5, 0.5, 1);
        set.push(
            Vector3::new(0.05, 0.0, 2.0),
            IDENTITY_QUATERNION,
            Vector3::new(0.1f64.ln(), 0.1f64.ln(), 0.1f64.ln()),
            Vector3::new(0.0, 1.0, 0.0),
            logit(0.5),
            logit(0.5),
        );
        let splats = project(&set, &field, &camera, 0.0).unwrap();
        let order = depth_order(&splats);
        assert_eq!(splats[order[0]].gaussian, 0);
        assert_eq!(splats[order[1]].gaussian, 1);
    }

    #[test]
    fn centered_gaussian_composites_to_closed_form() {
        let (set, field, camera) = single_gaussian_scene(0.6, 0.6, 2);
        let buffers = render(&set, &field, &camera, 0.0, RenderOptions::default()).unwrap();
        // The principal point (16, 16) sits on a pixel corner, so evaluate
        // the kernel explicitly at the center of pixel (15, 15).
        let idx = 15 * 32 + 15;
        let s = &project(&set, &field, &camera, 0.0).unwrap()[0];
        let (dx, dy) = (15.5 - s.mean.x, 15.5 - s.mean.y);
        let p = (-0.5 * (s.inv_xx * dx * dx + 2.0 * s.inv_xy * dx * dy + s.inv_yy * dy * dy))
            .exp();
        let a = 0.6 * p;
        assert_relative_eq!(buffers.color[idx * 3], a * 1.0, max_relative = 1e-12);
        assert_relative_eq!(buffers.color[idx * 3 + 1], 0.0, epsilon = 1e-15);
        assert_relative_eq!(buffers.marginal(1, idx), a * 0.5, max_relative = 1e-12);
        assert_relative_eq!(buffers.marginal(2, idx), a * 0.5, max_relative = 1e-12);
        assert_relative_eq!(buffers.residual[idx], 1.0 - a, max_relative = 1e-12);
        assert_relative_eq!(buffers.photo_transmittance[idx], 1.0 - a, max_relative = 1e-12);
    }

    #[test]
    fn exact_pixel_center_hit_uses_unit_kernel() {
        let mut set = GaussianSet::empty(1);
        set.push(
            Vector3::new(0.0, 0.0, 2.0),
            IDENTITY_QUATERNION,
            Vector3::new(0.1f64.ln(), 0.1f64.ln(), 0.1f64.ln()),
            Vector3::new(1.0, 0.0, 0.0),
            logit(0.6),
            logit(0.6),
        );
        let field = DeformationField::zeros(&DeformConfig::small());
        // Principal point at 15.5 px puts the mean exactly on a pixel center.
        let camera = Camera::axis_aligned(48.0, 48.0, 15.5, 15.5, 32, 32).unwrap();
        let buffers = render(&set, &field, &camera, 0.0, RenderOptions::default()).unwrap();
        let idx = 15 * 32 + 15;
        assert_relative_eq!(buffers.color[idx * 3], 0.6, max_relative = 1e-12);
        assert_relative_eq!(buffers.marginal(1, idx), 0.6, max_relative = 1e-12);
        assert_relative_eq!(buffers.residual[idx], 0.4, max_relative = 1e-12);
    }

    #[test]
    fn coincident_pair_stacks_marginal_mass() {
        let mut set = GaussianSet::empty(1);
        for _ in 0..2 {
            set.push(
                Vector3::new(0.0, 0.0, 2.0),
                IDENTITY_QUATERNION,
                Vector3::new(0.1f64.ln(), 0.1f64.ln(), 0.1f64.ln()),
                Vector3::new(1.0, 1.0, 1.0),
                logit(0.5),
                logit(0.5),
            );
        }
        let field = DeformationField::zeros(&DeformConfig::small());
        let camera = Camera::axis_aligned(48.0, 48.0, 15.5, 15.5, 32, 32).unwrap();
        let buffers = render(&set, &field, &camera, 0.0, RenderOptions::default()).unwrap();
        let idx = 15 * 32 + 15;
        // 0.5 + 0.5 * 0.5 of the mass lands on the single instance.
        assert_relative_eq!(buffers.marginal(1, idx), 0.75, max_relative = 1e-12);
        assert_relative_eq!(buffers.residual[idx], 0.25, max_relative = 1e-12);
    }

    #[test]
    fn marginals_and_residual_sum_to_one_everywhere() {
        let scene = testgen::random_scene(41, 60, 3, 48, 40);
        let buffers =
            render(&scene.set, &scene.field, &scene.camera, scene.time, RenderOptions::default())
                .unwrap();
        for idx in 0..buffers.pixel_count() {
            let total: f64 =
                (1..=3).map(|k| buffers.marginal(k, idx)).sum::<f64>() + buffers.residual[idx];
            assert!((total - 1.0).abs() < 1e-12, "pixel {idx}: sum {total}");
        }
    }

    #[test]
    fn tiled_render_matches_reference_bitwise() {
        for seed in [7u64, 8, 9] {
            let scene = testgen::random_scene(seed, 80, 3, 52, 44);
            let opts = RenderOptions { contributions: true, cache: false };
            let tiled =
                render(&scene.set, &scene.field, &scene.camera, scene.time, opts).unwrap();
            let reference =
                render_reference(&scene.set, &scene.field, &scene.camera, scene.time, opts)
                    .unwrap();
            assert_eq!(tiled.color, reference.color, "seed {seed}");
            assert_eq!(tiled.marginals, reference.marginals, "seed {seed}");
            assert_eq!(tiled.residual, reference.residual, "seed {seed}");
            assert_eq!(tiled.photo_transmittance, reference.photo_transmittance);
            assert_eq!(tiled.contributions, reference.contributions);
        }
    }

    #[test]
    fn render_is_invariant_to_gaussian_order() {
        let scene = testgen::random_scene(11, 50, 2, 40, 40);
        let base =
            render(&scene.set, &scene.field, &scene.camera, scene.time, RenderOptions::default())
                .unwrap();
        let mut perm: Vec<usize> = (0..scene.set.len()).collect();
        perm.reverse();
        perm.swap(3, 17);
        let shuffled = testgen::permuted_set(&scene.set, &perm);
        let permuted =
            render(&shuffled, &scene.field, &scene.camera, scene.time, RenderOptions::default())
                .unwrap();
        assert_eq!(base.color, permuted.color);
        assert_eq!(base.marginals, permuted.marginals);
        assert_eq!(base.residual, permuted.residual);
    }

    #[test]
    fn empty_set_renders_background_only() {
        let set = GaussianSet::empty(2);
        let field = DeformationField::zeros(&DeformConfig::small());
        let camera = Camera::axis_aligned(48.0, 48.0, 16.0, 16.0, 32, 32).unwrap();
        let buffers = render(&set, &field, &camera, 0.0, RenderOptions::default()).unwrap();
        assert!(buffers.color.iter().all(|&v| v == 0.0));
        assert!(buffers.marginals.iter().all(|&v| v == 0.0));
        assert!(buffers.residual.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_requires_cache() {
        let (set, field, camera) = single_gaussian_scene(0.5, 0.5, 1);
        let opts = RenderOptions { contributions: false, cache: false };
        let buffers = render(&set, &field, &camera, 0.0, opts).unwrap();
        let up = RenderUpstream::zeros(32, 32, 1);
        match render_backward(&set, &field, &camera, &buffers, &up) {
            Err(Error::Usage(_)) => {}
            other => panic!("expected usage error, got {other:?}"),
        }
    }

    #[test]
    fn backward_single_term_matches_hand_derivation() {
        let mut set = GaussianSet::empty(1);
        set.push(
            Vector3::new(0.0, 0.0, 2.0),
            IDENTITY_QUATERNION,
            Vector3::new(0.1f64.ln(), 0.1f64.ln(), 0.1f64.ln()),
            Vector3::new(0.8, 0.3, 0.1),
            logit(0.6),
            logit(0.25),
        );
        let field = DeformationField::zeros(&DeformConfig::small());
        let camera = Camera::axis_aligned(48.0, 48.0, 15.5, 15.5, 32, 32).unwrap();
        let buffers = render(&set, &field, &camera, 0.0, RenderOptions::default()).unwrap();
        let idx = 15 * 32 + 15;
        let mut up = RenderUpstream::zeros(32, 32, 1);
        up.d_color[idx * 3] = 1.0;
        let grads = render_backward(&set, &field, &camera, &buffers, &up).unwrap();
        // At the exact center P = 1: dC_r/d(alpha) = c_r, then the logit
        // chain multiplies by alpha * (1 - alpha).
        assert_relative_eq!(grads.opacity_logits[0], 0.8 * 0.6 * 0.4, max_relative = 1e-12);
        assert_relative_eq!(grads.colors[0].x, 0.6, max_relative = 1e-12);
        assert_relative_eq!(grads.colors[0].y, 0.0, epsilon = 1e-15);
        assert_eq!(grads.occupancy_logits[0], 0.0);
        // The kernel gradient vanishes at the peak, so nothing flows to the
        // mean or covariance and the positional gradient is zero.
        assert_relative_eq!(grads.positions[0].x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(grads.positions[0].y, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences_on_smooth_scene() {
        let scene = testgen::smooth_scene(3, 8, 2, 24, 24);
        let up = testgen::random_upstream(5, 24, 24, 2);
        let layout = ParamLayout::of(&scene.set, &scene.field);

        let loss = |packed: &[f64]| -> f64 {
            let mut set = scene.set.clone();
            let mut field = scene.field.clone();
            unpack_parameters(&mut set, &mut field, packed).unwrap();
            let b = render(
                &set,
                &field,
                &scene.camera,
                scene.time,
                RenderOptions { contributions: false, cache: false },
            )
            .unwrap();
            let mut total = 0.0;
            for (v, d) in b.color.iter().zip(&up.d_color) {
                total += v * d;
            }
            for (v, d) in b.marginals.iter().zip(&up.d_marginals) {
                total += v * d;
            }
            for (v, d) in b.residual.iter().zip(&up.d_residual) {
                total += v * d;
            }
            total
        };

        let buffers =
            render(&scene.set, &scene.field, &scene.camera, scene.time, RenderOptions::default())
                .unwrap();
        let grads =
            render_backward(&scene.set, &scene.field, &scene.camera, &buffers, &up).unwrap();
        let packed_grad = grads.to_packed();
        let base = pack_parameters(&scene.set, &scene.field);

        // Spot-check a spread of coordinates across every parameter group.
        let total = layout.total_len();
        assert_eq!(packed_grad.len(), total);
        let h = 1e-5;
        let mut checked = 0;
        for i in (0..total).step_by(total / 60 + 1) {
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let analytic = packed_grad[i];
            // The probe loss reaches O(100), so central differences at
            // h = 1e-5 carry ~1e-8 absolute noise; the floor in the
            // denominator turns the relative bound into an absolute one for
            // gradients smaller than 1e-4.
            let denom = fd.abs().max(analytic.abs()).max(1e-4);
            assert!(
                (fd - analytic).abs() / denom < 1e-4,
                "coordinate {i}: fd {fd:.9e} vs analytic {analytic:.9e}"
            );
            checked += 1;
        }
        assert!(checked >= 50);
    }
}
