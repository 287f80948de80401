//! Losses, the Adam optimizer, and the two-stage training schedule:
//! photometric reconstruction first, then identity estimation followed by
//! joint photometric + instance training with periodic resampling.
//!
//! All gradients flow through the packed parameter vector (see
//! [`crate::params`]), one frame per iteration. Reproducibility contract:
//! a fixed seed yields bit-identical results at any worker count, because
//! every random decision draws from a ChaCha stream derived from the master
//! seed and the global iteration counter.

use std::io::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::data::SceneDataset;
use crate::deform::{DeformConfig, DeformationField};
use crate::error::{Error, Result};
use crate::gaussians::{logit, GaussianSet, IDENTITY_QUATERNION};
use crate::identity::{estimate_identities, MaskFrame};
use crate::params::{
    pack_parameters, unpack_parameters, Gradients, ParamGroup, ParamLayout, GROUPS,
};
use crate::resample::resample_round;
use crate::splat::{render, RenderBuffers, RenderOptions, RenderUpstream};
use crate::{LOG_FLOOR, RESPONSE_EPS};

/// ChaCha stream ids derived from the master seed. Keeping per-purpose and
/// per-iteration streams makes every phase independently reproducible.
const STREAM_INIT: u64 = 0;
const STREAM_FIELD: u64 = 1;
const STREAM_SHUFFLE_BASE: u64 = 1 << 41;
const STREAM_RESAMPLE_BASE: u64 = 1 << 40;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Per-group learning rates. The position rate decays exponentially to
/// `position_final` over the configured horizon and both ends are scaled by
/// the scene extent (bounding-box half-diagonal).
#[derive(Debug, Clone, Copy)]
pub struct LearningRates {
    pub position: f64,
    pub position_final: f64,
    pub rotation: f64,
    pub scale: f64,
    pub color: f64,
    pub opacity: f64,
    pub occupancy: f64,
    /// Base identities are estimated, not optimized.
    pub base_identity: f64,
    pub calibration: f64,
    pub field: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            position: 1.6e-4,
            position_final: 1.6e-6,
            rotation: 1e-3,
            scale: 5e-3,
            color: 2.5e-3,
            opacity: 5e-2,
            occupancy: 1e-2,
            base_identity: 0.0,
            calibration: 1e-2,
            field: 1.6e-4,
        }
    }
}

/// Full training configuration.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub iters_recon: usize,
    pub iters_inst: usize,
    pub lambda_inst: f64,
    pub rates: LearningRates,
    pub resample_rate: f64,
    pub resample_every: usize,
    pub resample_eps: f64,
    /// Number of Gaussians to initialize.
    pub gaussians: usize,
    pub field_config: DeformConfig,
    pub seed: u64,
    pub log_every: usize,
    /// Draw frames from a seeded stream instead of round-robin.
    pub shuffle_frames: bool,
    /// Ablation switch: when false the calibration factors stay frozen at 0.
    pub enable_calibration: bool,
    /// Ablation switch: when false no resampling rounds run.
    pub enable_resampling: bool,
    /// Append one record per executed resampling pair to this file.
    pub resample_log: Option<std::path::PathBuf>,
    /// Suppress progress lines.
    pub quiet: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iters_recon: 10_000,
            iters_inst: 3_000,
            lambda_inst: 0.01,
            rates: LearningRates::default(),
            resample_rate: 0.01,
            resample_every: 500,
            resample_eps: RESPONSE_EPS,
            gaussians: 2_000,
            field_config: DeformConfig::standard(),
            seed: 0,
            log_every: 100,
            shuffle_frames: false,
            enable_calibration: true,
            enable_resampling: true,
            resample_log: None,
            quiet: false,
        }
    }
}

/// Mean absolute error over all pixels and channels, with its subgradient
/// (zero at exact ties).
pub fn loss_rgb(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "rendered image has {} values, target has {}",
            pred.len(),
            target.len()
        )));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for (g, (&p, &t)) in grad.iter_mut().zip(pred.iter().zip(target)) {
        let d = p - t;
        loss += d.abs();
        *g = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok((loss / n, grad))
}

/// Per-pixel cross-entropy of the rendered instance distribution
/// `(R, M_1..M_K)` against mask labels, floored at [`LOG_FLOOR`] inside the
/// log. Returns the loss and adjoints for the marginals (pixel-major `H*W*K`)
/// and the residual.
pub fn loss_inst(buffers: &RenderBuffers, labels: &[u16]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let pixels = buffers.pixel_count();
    if labels.len() != pixels {
        return Err(Error::ShapeMismatch(format!(
            "mask has {} pixels, buffers have {pixels}",
            labels.len()
        )));
    }
    let k = buffers.instances;
    let n = pixels as f64;
    let mut loss = 0.0;
    let mut d_marginals = vec![0.0; pixels * k];
    let mut d_residual = vec![0.0; pixels];
    for (idx, &label) in labels.iter().enumerate() {
        if usize::from(label) > k {
            return Err(Error::LabelOverflow { label: u32::from(label), declared: k as u32 });
        }
        let q = if label == 0 {
            buffers.residual[idx]
        } else {
            buffers.marginals[idx * k + usize::from(label) - 1]
        };
        loss += -q.max(LOG_FLOOR).ln();
        if q >= LOG_FLOOR {
            let g = -1.0 / (q * n);
            if label == 0 {
                d_residual[idx] = g;
            } else {
                d_marginals[idx * k + usize::from(label) - 1] = g;
            }
        }
    }
    Ok((loss / n, d_marginals, d_residual))
}

/// Peak signal-to-noise ratio in dB with predictions clamped to `[0, 1]`.
pub fn psnr(pred: &[f64], target: &[f64]) -> f64 {
    debug_assert_eq!(pred.len(), target.len());
    let mut mse = 0.0;
    for (&p, &t) in pred.iter().zip(target) {
        let d = p.clamp(0.0, 1.0) - t;
        mse += d * d;
    }
    mse /= pred.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Adam first/second moments over the packed parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Clears the moments of a packed range (used after a Gaussian is
    /// overwritten by resampling).
    pub fn reset_range(&mut self, range: std::ops::Range<usize>) {
        self.m[range.clone()].fill(0.0);
        self.v[range].fill(0.0);
    }
}

/// One bias-corrected Adam update with per-group learning rates (ordered as
/// [`GROUPS`]). Quaternions are re-normalized afterward. Non-finite
/// gradients abort with a diagnostic naming the offending group.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [f64],
    grads: &[f64],
    layout: &ParamLayout,
    rates: &[f64; GROUPS.len()],
) -> Result<()> {
    if params.len() != layout.total_len() || grads.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam shapes: params {}, grads {}, layout {}",
            params.len(),
            grads.len(),
            layout.total_len()
        )));
    }
    if state.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "optimizer tracks {} parameters, step got {}",
            state.len(),
            params.len()
        )));
    }
    if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient {} at packed index {bad} ({:?})",
            grads[bad],
            layout.group_of(bad)
        )));
    }

    state.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    for (gi, group) in GROUPS.iter().enumerate() {
        let lr = rates[gi];
        for i in layout.range(*group) {
            let g = grads[i];
            state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
            state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = state.m[i] / bc1;
            let v_hat = state.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }

    let rot = layout.range(ParamGroup::Rotation);
    for chunk in params[rot].chunks_exact_mut(4) {
        let norm = (chunk.iter().map(|v| v * v).sum::<f64>()).sqrt();
        if norm < 1e-8 {
            return Err(Error::Numeric(format!("quaternion collapsed to norm {norm} during update")));
        }
        for v in chunk {
            *v /= norm;
        }
    }
    Ok(())
}

/// Resolves the per-group learning rates at a given iteration. `horizon` is
/// the total planned iteration count for the exponential position decay;
/// `extent` scales the position rate; `calibrate = false` freezes the
/// calibration factors.
pub fn resolve_rates(
    rates: &LearningRates,
    iteration: u64,
    horizon: u64,
    extent: f64,
    calibrate: bool,
) -> [f64; GROUPS.len()] {
    let progress = if horizon == 0 { 0.0 } else { iteration as f64 / horizon as f64 };
    let position = extent
        * rates.position
        * (rates.position_final / rates.position).powf(progress.clamp(0.0, 1.0));
    let mut out = [0.0; GROUPS.len()];
    for (slot, group) in out.iter_mut().zip(GROUPS.iter()) {
        *slot = match group {
            ParamGroup::Position => position,
            ParamGroup::Rotation => rates.rotation,
            ParamGroup::Scale => rates.scale,
            ParamGroup::Color => rates.color,
            ParamGroup::Opacity => rates.opacity,
            ParamGroup::Occupancy => rates.occupancy,
            ParamGroup::BaseIdentity => rates.base_identity,
            ParamGroup::Calibration => {
                if calibrate {
                    rates.calibration
                } else {
                    0.0
                }
            }
            ParamGroup::FieldWeights => rates.field,
        };
    }
    out
}

/// Mutable training state threaded through the stages.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub set: GaussianSet,
    pub field: DeformationField,
    pub opt: AdamState,
    pub iteration: u64,
    pub seed: [u8; 32],
}

impl TrainState {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            set: self.set.clone(),
            field: self.field.clone(),
            iteration: self.iteration,
            rng_seed: self.seed,
        }
    }

    /// Rebuilds training state from a checkpoint. Optimizer moments are not
    /// persisted; they restart at zero.
    pub fn from_checkpoint(ck: Checkpoint) -> Self {
        let layout = ParamLayout::of(&ck.set, &ck.field);
        TrainState {
            set: ck.set,
            field: ck.field,
            opt: AdamState::new(layout.total_len()),
            iteration: ck.iteration,
            seed: ck.rng_seed,
        }
    }
}

fn master_rng(seed: [u8; 32], stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng
}

/// Scene extent used to scale the position learning rate: half the diagonal
/// of the scene bounding box.
fn scene_extent(scene: &SceneDataset) -> f64 {
    let (lo, hi) = scene.bbox;
    ((hi - lo).norm() / 2.0).max(1e-6)
}

/// Fresh training state: Gaussians sampled uniformly in the scene bounding
/// box with mid-gray color, opacity and occupancy 0.1, uniform identities,
/// isotropic scale from the per-Gaussian volume share, plus a seeded
/// deformation field that starts as the identity map.
pub fn init_state(scene: &SceneDataset, config: &TrainConfig) -> Result<TrainState> {
    if config.gaussians == 0 {
        return Err(Error::InvalidArgument("need at least one Gaussian".into()));
    }
    let seed = ChaCha8Rng::seed_from_u64(config.seed).get_seed();
    let k = scene.instances.max(1);
    let (lo, hi) = scene.bbox;
    let span = hi - lo;
    let volume = (span.x * span.y * span.z).abs();
    let r0 = if volume > 0.0 {
        0.5 * (volume / config.gaussians as f64).cbrt()
    } else {
        0.1
    };
    let log_r0 = r0.ln();

    let mut rng = master_rng(seed, STREAM_INIT);
    let mut set = GaussianSet::empty(k);
    for _ in 0..config.gaussians {
        let position = nalgebra::Vector3::new(
            lo.x + rng.gen::<f64>() * span.x,
            lo.y + rng.gen::<f64>() * span.y,
            lo.z + rng.gen::<f64>() * span.z,
        );
        set.push(
            position,
            IDENTITY_QUATERNION,
            nalgebra::Vector3::new(log_r0, log_r0, log_r0),
            nalgebra::Vector3::new(0.5, 0.5, 0.5),
            logit(0.1),
            logit(0.1),
        );
    }

    let mut field_rng = master_rng(seed, STREAM_FIELD);
    let field = DeformationField::seeded(&config.field_config, &mut field_rng);
    let layout = ParamLayout::of(&set, &field);
    Ok(TrainState { set, field, opt: AdamState::new(layout.total_len()), iteration: 0, seed })
}

fn pick_frame(state: &TrainState, config: &TrainConfig, pool: &[usize]) -> usize {
    if config.shuffle_frames {
        let mut rng = master_rng(state.seed, STREAM_SHUFFLE_BASE + state.iteration);
        pool[rng.gen_range(0..pool.len())]
    } else {
        pool[(state.iteration as usize) % pool.len()]
    }
}

/// Renders one frame, evaluates `L = L_rgb + lambda * L_inst`, and returns
/// the total loss together with gradients for every packed parameter.
pub fn total_loss_and_gradients(
    set: &GaussianSet,
    field: &DeformationField,
    camera: &crate::camera::Camera,
    t: f64,
    target_rgb: &[f64],
    labels: &[u16],
    lambda: f64,
) -> Result<(f64, Gradients)> {
    let buffers = render(set, field, camera, t, RenderOptions { contributions: false, cache: true })?;
    let (l_rgb, d_color) = loss_rgb(&buffers.color, target_rgb)?;
    let mut upstream = RenderUpstream {
        d_color,
        d_marginals: vec![0.0; buffers.pixel_count() * buffers.instances],
        d_residual: vec![0.0; buffers.pixel_count()],
    };
    let mut total = l_rgb;
    if lambda != 0.0 {
        let (l_inst, d_m, d_r) = loss_inst(&buffers, labels)?;
        total += lambda * l_inst;
        for (dst, src) in upstream.d_marginals.iter_mut().zip(&d_m) {
            *dst = lambda * src;
        }
        for (dst, src) in upstream.d_residual.iter_mut().zip(&d_r) {
            *dst = lambda * src;
        }
    }
    let grads = crate::splat::render_backward(set, field, camera, &buffers, &upstream)?;
    Ok((total, grads))
}

/// The same objective without gradients (finite-difference harnesses).
pub fn total_loss(
    set: &GaussianSet,
    field: &DeformationField,
    camera: &crate::camera::Camera,
    t: f64,
    target_rgb: &[f64],
    labels: &[u16],
    lambda: f64,
) -> Result<f64> {
    let buffers =
        render(set, field, camera, t, RenderOptions { contributions: false, cache: false })?;
    let (l_rgb, _) = loss_rgb(&buffers.color, target_rgb)?;
    let mut total = l_rgb;
    if lambda != 0.0 {
        let (l_inst, _, _) = loss_inst(&buffers, labels)?;
        total += lambda * l_inst;
    }
    Ok(total)
}

struct IterationOutcome {
    l_rgb: f64,
    l_inst: f64,
    psnr: f64,
}

/// One optimization step on one frame. `lambda = 0` skips the instance path
/// entirely (pure reconstruction).
fn train_iteration(
    scene: &SceneDataset,
    config: &TrainConfig,
    state: &mut TrainState,
    pool: &[usize],
    lambda: f64,
    horizon: u64,
    extent: f64,
    compute_inst_loss: bool,
) -> Result<IterationOutcome> {
    let frame = &scene.frames[pick_frame(state, config, pool)];
    let camera = &scene.cameras[frame.camera];
    let buffers = render(
        &state.set,
        &state.field,
        camera,
        frame.time,
        RenderOptions { contributions: false, cache: true },
    )?;
    let (l_rgb, d_color) = loss_rgb(&buffers.color, &frame.rgb)?;
    let quality = psnr(&buffers.color, &frame.rgb);

    let pixels = buffers.pixel_count();
    let k = buffers.instances;
    let mut upstream =
        RenderUpstream { d_color, d_marginals: vec![0.0; pixels * k], d_residual: vec![0.0; pixels] };
    let mut l_inst = 0.0;
    if compute_inst_loss {
        let (li, d_m, d_r) = loss_inst(&buffers, &frame.labels)?;
        l_inst = li;
        if lambda != 0.0 {
            for (dst, src) in upstream.d_marginals.iter_mut().zip(&d_m) {
                *dst = lambda * src;
            }
            for (dst, src) in upstream.d_residual.iter_mut().zip(&d_r) {
                *dst = lambda * src;
            }
        }
    }

    let grads = crate::splat::render_backward(&state.set, &state.field, camera, &buffers, &upstream)?;
    let mut params = pack_parameters(&state.set, &state.field);
    let packed_grads = grads.to_packed();
    let layout = ParamLayout::of(&state.set, &state.field);
    let rates = resolve_rates(
        &config.rates,
        state.iteration,
        horizon,
        extent,
        config.enable_calibration,
    );
    adam_step(&mut state.opt, &mut params, &packed_grads, &layout, &rates)?;
    unpack_parameters(&mut state.set, &mut state.field, &params)?;
    state.iteration += 1;
    Ok(IterationOutcome { l_rgb, l_inst, psnr: quality })
}

fn log_progress(config: &TrainConfig, state: &TrainState, out: &IterationOutcome) {
    if !config.quiet {
        println!(
            "iter {:>6}  L_rgb {:.6}  L_inst {:.6}  PSNR {:.2}",
            state.iteration, out.l_rgb, out.l_inst, out.psnr
        );
    }
}

fn should_log(config: &TrainConfig, step_in_stage: usize, stage_total: usize) -> bool {
    let human = step_in_stage + 1;
    (config.log_every > 0 && human % config.log_every == 0) || human == stage_total
}

/// Stage 1: photometric-only training from a fresh initialization.
pub fn train_reconstruction(scene: &SceneDataset, config: &TrainConfig) -> Result<TrainState> {
    let state = init_state(scene, config)?;
    continue_reconstruction(scene, config, state)
}

/// Stage 1 continued from existing state (used when resuming).
pub fn continue_reconstruction(
    scene: &SceneDataset,
    config: &TrainConfig,
    mut state: TrainState,
) -> Result<TrainState> {
    let pool = scene.train_frames();
    if pool.is_empty() {
        return Err(Error::Usage("scene has no training frames".into()));
    }
    let horizon = (config.iters_recon + config.iters_inst) as u64;
    let extent = scene_extent(scene);
    for step in 0..config.iters_recon {
        let out = train_iteration(scene, config, &mut state, &pool, 0.0, horizon, extent, false)?;
        if should_log(config, step, config.iters_recon) {
            log_progress(config, &state, &out);
        }
    }
    Ok(state)
}

/// Stage 2: estimates identities once, then joint photometric + instance
/// training with resampling every `resample_every` iterations.
pub fn train_instance(
    scene: &SceneDataset,
    config: &TrainConfig,
    mut state: TrainState,
) -> Result<TrainState> {
    if scene.instances == 0 {
        return Err(Error::Usage("instance training needs a scene with instances".into()));
    }
    let pool = scene.train_frames();
    if pool.is_empty() {
        return Err(Error::Usage("scene has no training frames".into()));
    }

    let mask_frames: Vec<MaskFrame> = pool
        .iter()
        .map(|&idx| {
            let frame = &scene.frames[idx];
            MaskFrame {
                camera: &scene.cameras[frame.camera],
                time: frame.time,
                labels: &frame.labels,
            }
        })
        .collect();
    estimate_identities(&mut state.set, &state.field, &mask_frames)?;

    let horizon = (config.iters_recon + config.iters_inst) as u64;
    let extent = scene_extent(scene);
    for step in 0..config.iters_inst {
        if config.enable_resampling
            && config.resample_every > 0
            && step > 0
            && step % config.resample_every == 0
        {
            let mut rng = master_rng(state.seed, STREAM_RESAMPLE_BASE + state.iteration);
            let report =
                resample_round(&mut state.set, config.resample_eps, config.resample_rate, &mut rng)?;
            let layout = ParamLayout::of(&state.set, &state.field);
            for pair in &report.pairs {
                for range in layout.gaussian_ranges(pair.weak) {
                    state.opt.reset_range(range);
                }
            }
            if let Some(path) = &config.resample_log {
                let mut file = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)?;
                writeln!(file, "# iteration {}", state.iteration)?;
                file.write_all(report.log_lines().as_bytes())?;
            }
            if !config.quiet {
                println!(
                    "iter {:>6}  resampled {} pairs ({} skipped)",
                    state.iteration,
                    report.pairs.len(),
                    report.skipped
                );
            }
        }
        let out = train_iteration(
            scene,
            config,
            &mut state,
            &pool,
            config.lambda_inst,
            horizon,
            extent,
            true,
        )?;
        if should_log(config, step, config.iters_inst) {
            log_progress(config, &state, &out);
        }
    }
    Ok(state)
}

/// Both stages back to back.
pub fn train_full(scene: &SceneDataset, config: &TrainConfig) -> Result<TrainState> {
    let state = train_reconstruction(scene, config)?;
    train_instance(scene, config, state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rgb_loss_examples() {
        let a = vec![0.5; 12];
        assert_eq!(loss_rgb(&a, &a).unwrap().0, 0.0);
        let b = vec![0.4; 12];
        let (loss, grad) = loss_rgb(&a, &b).unwrap();
        assert_relative_eq!(loss, 0.1, max_relative = 1e-12);
        assert!(grad.iter().all(|&g| (g - 1.0 / 12.0).abs() < 1e-15));
        // Half the values offset by 0.2: mean is 0.1.
        let mut c = a.clone();
        for v in c.iter_mut().take(6) {
            *v -= 0.2;
        }
        let (loss, grad) = loss_rgb(&c, &a).unwrap();
        assert_relative_eq!(loss, 0.1, max_relative = 1e-12);
        assert!(grad[..6].iter().all(|&g| g < 0.0));
        assert!(grad[6..].iter().all(|&g| g == 0.0));
        assert!(loss_rgb(&a, &b[..6]).is_err());
    }

    fn inst_buffers(marginals: Vec<f64>, residual: Vec<f64>, k: usize) -> RenderBuffers {
        let pixels = residual.len();
        RenderBuffers {
            width: pixels,
            height: 1,
            instances: k,
            color: vec![0.0; pixels * 3],
            marginals,
            residual,
            photo_transmittance: vec![1.0; pixels],
            contributions: None,
            cache: None,
        }
    }

    #[test]
    fn instance_loss_examples() {
        // Perfect prediction.
        let buffers = inst_buffers(vec![1.0, 0.0, 1.0, 0.0], vec![0.0, 0.0], 2);
        let (loss, _, _) = loss_inst(&buffers, &[1, 1]).unwrap();
        assert_eq!(loss, 0.0);

        // q = 0.5 at both pixels.
        let buffers = inst_buffers(vec![0.5, 0.25, 0.5, 0.25], vec![0.25, 0.25], 2);
        let (loss, d_m, d_r) = loss_inst(&buffers, &[1, 1]).unwrap();
        assert_relative_eq!(loss, std::f64::consts::LN_2, max_relative = 1e-12);
        assert_relative_eq!(d_m[0], -1.0 / (0.5 * 2.0), max_relative = 1e-12);
        assert_eq!(d_m[1], 0.0);
        assert_eq!(d_r[0], 0.0);

        // All mass on the wrong class: the floor bounds the loss.
        let buffers = inst_buffers(vec![1.0, 0.0], vec![0.0], 2);
        let (loss, d_m, d_r) = loss_inst(&buffers, &[2]).unwrap();
        assert_relative_eq!(loss, -(LOG_FLOOR.ln()), max_relative = 1e-12);
        assert!(d_m.iter().all(|&g| g == 0.0));
        assert!(d_r.iter().all(|&g| g == 0.0));

        // Background pixels route into the residual adjoint.
        let buffers = inst_buffers(vec![0.3, 0.2], vec![0.5], 2);
        let (loss, _, d_r) = loss_inst(&buffers, &[0]).unwrap();
        assert_relative_eq!(loss, -(0.5f64.ln()), max_relative = 1e-12);
        assert_relative_eq!(d_r[0], -1.0 / 0.5, max_relative = 1e-12);

        assert!(matches!(loss_inst(&buffers, &[3]), Err(Error::LabelOverflow { label: 3, declared: 2 })));
    }

    #[test]
    fn psnr_handles_perfect_and_known_errors() {
        let a = vec![0.25; 8];
        assert!(psnr(&a, &a).is_infinite());
        let b = vec![0.35; 8];
        // MSE = 0.01 -> 20 dB.
        assert_relative_eq!(psnr(&a, &b), 20.0, max_relative = 1e-12);
        // Out-of-range predictions are clamped before comparison.
        let wild = vec![1.5; 8];
        let ones = vec![1.0; 8];
        assert!(psnr(&wild, &ones).is_infinite());
    }

    fn tiny_layout() -> (GaussianSet, DeformationField, ParamLayout) {
        let mut set = GaussianSet::empty(2);
        set.push(
            nalgebra::Vector3::new(0.0, 0.0, 2.0),
            IDENTITY_QUATERNION,
            nalgebra::Vector3::zeros(),
            nalgebra::Vector3::new(0.5, 0.5, 0.5),
            0.0,
            0.0,
        );
        let field = DeformationField::zeros(&DeformConfig::small());
        let layout = ParamLayout::of(&set, &field);
        (set, field, layout)
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let (set, field, layout) = tiny_layout();
        let mut params = pack_parameters(&set, &field);
        let before = params.clone();
        let mut state = AdamState::new(params.len());
        let grads = vec![0.0; params.len()];
        let rates = [0.01; GROUPS.len()];
        adam_step(&mut state, &mut params, &grads, &layout, &rates).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let (set, field, layout) = tiny_layout();
        let mut params = pack_parameters(&set, &field);
        let mut state = AdamState::new(params.len());
        let mut grads = vec![0.0; params.len()];
        // A color coordinate: no renormalization touches it.
        let idx = layout.range(ParamGroup::Color).start;
        grads[idx] = 1.0;
        let before = params[idx];
        let rates = [0.01; GROUPS.len()];
        adam_step(&mut state, &mut params, &grads, &layout, &rates).unwrap();
        assert_relative_eq!(before - params[idx], 0.01, max_relative = 1e-7);
    }

    #[test]
    fn adam_is_deterministic_and_rejects_non_finite() {
        let (set, field, layout) = tiny_layout();
        let base = pack_parameters(&set, &field);
        let mut grads = vec![0.0; base.len()];
        grads[0] = 0.5;
        let rates = [0.01; GROUPS.len()];

        let mut p1 = base.clone();
        let mut s1 = AdamState::new(base.len());
        adam_step(&mut s1, &mut p1, &grads, &layout, &rates).unwrap();
        let mut p2 = base.clone();
        let mut s2 = AdamState::new(base.len());
        adam_step(&mut s2, &mut p2, &grads, &layout, &rates).unwrap();
        assert_eq!(p1, p2);

        grads[3] = f64::NAN;
        let mut p3 = base.clone();
        let mut s3 = AdamState::new(base.len());
        match adam_step(&mut s3, &mut p3, &grads, &layout, &rates) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("index 3")),
            other => panic!("expected numeric abort, got {other:?}"),
        }
    }

    #[test]
    fn adam_renormalizes_quaternions() {
        let (set, field, layout) = tiny_layout();
        let mut params = pack_parameters(&set, &field);
        let mut state = AdamState::new(params.len());
        let mut grads = vec![0.0; params.len()];
        let rot = layout.range(ParamGroup::Rotation);
        grads[rot.start + 1] = -2.0;
        let rates = [0.05; GROUPS.len()];
        adam_step(&mut state, &mut params, &grads, &layout, &rates).unwrap();
        let q = &params[rot.start..rot.start + 4];
        let norm: f64 = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert_relative_eq!(norm, 1.0, max_relative = 1e-12);
        assert!(q[1] > 0.0);
    }

    #[test]
    fn position_rate_decays_between_endpoints() {
        let rates = LearningRates::default();
        let start = resolve_rates(&rates, 0, 1000, 2.0, true);
        let end = resolve_rates(&rates, 1000, 1000, 2.0, true);
        assert_relative_eq!(start[0], 2.0 * 1.6e-4, max_relative = 1e-12);
        assert_relative_eq!(end[0], 2.0 * 1.6e-6, max_relative = 1e-9);
        let frozen = resolve_rates(&rates, 0, 1000, 2.0, false);
        let calib_slot = GROUPS.iter().position(|g| *g == ParamGroup::Calibration).unwrap();
        assert_eq!(frozen[calib_slot], 0.0);
        assert!(start[calib_slot] > 0.0);
    }
}
