//! Command-line driver: train, render, eval, synth, merge-views, inspect.
//!
//! Exit codes: 0 on success, 2 for input/validation problems, 3 for numeric
//! failures. The environment variable `CIF_THREADS` caps the worker pool
//! (0 or unset = automatic).

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cif::checkpoint::{load_checkpoint, save_checkpoint};
use cif::data::synth::{preset, synth_scene, PRESETS};
use cif::data::{load_scene, visibility_filter, write_scene, zigzag_merge, SceneDataset, Split};
use cif::deform::DeformationField;
use cif::error::{Error, Result};
use cif::eval::{evaluate, panoptic_map};
use cif::gaussians::GaussianSet;
use cif::splat::{render, RenderOptions};
use cif::train::{
    psnr, train_full, train_instance, train_reconstruction, TrainConfig, TrainState,
};

#[derive(Parser)]
#[command(
    name = "cif",
    version,
    about = "Consistent instance fields: deformable Gaussian scenes with per-instance identities"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a Gaussian scene against a dataset and write a checkpoint.
    Train(TrainArgs),
    /// Render color, panoptic labels, and optional marginals from a checkpoint.
    Render(RenderArgs),
    /// Score a checkpoint's panoptic maps against dataset masks.
    Eval(EvalArgs),
    /// Generate a synthetic blob scene with ground-truth masks.
    Synth(SynthArgs),
    /// Merge multi-view scene directories into one pseudo-monocular scene.
    MergeViews(MergeArgs),
    /// Summarize a checkpoint or scene directory.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Stage {
    Recon,
    Instance,
    Full,
}

#[derive(Args)]
struct TrainArgs {
    /// Scene directory containing scene.json.
    #[arg(long)]
    scene: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Which stages to run.
    #[arg(long, value_enum, default_value_t = Stage::Full)]
    stage: Stage,
    /// Resume from an existing checkpoint instead of a fresh initialization.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    iters_recon: usize,
    #[arg(long, default_value_t = 3_000)]
    iters_inst: usize,
    /// Weight of the instance loss in the joint objective.
    #[arg(long, default_value_t = 0.01)]
    lambda_inst: f64,
    /// Fraction of Gaussians re-seeded per resampling round.
    #[arg(long, default_value_t = 0.01)]
    resample_rate: f64,
    /// Iterations between resampling rounds (0 disables).
    #[arg(long, default_value_t = 500)]
    resample_every: usize,
    /// Number of Gaussians at initialization.
    #[arg(long, default_value_t = 2_000)]
    gaussians: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Append resampling decisions to this file.
    #[arg(long)]
    resample_log: Option<PathBuf>,
    /// Progress line cadence in iterations.
    #[arg(long, default_value_t = 100)]
    log_every: usize,
    /// Pick training frames from a seeded stream instead of round-robin.
    #[arg(long)]
    shuffle_frames: bool,
    /// Freeze calibration factors at zero and exclude them from updates.
    #[arg(long)]
    no_calibration: bool,
    /// Disable resampling rounds.
    #[arg(long)]
    no_resampling: bool,
    /// Suppress progress output.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    /// Frame index supplying time and camera defaults.
    #[arg(long)]
    frame: usize,
    /// Override the frame's normalized time.
    #[arg(long)]
    time: Option<f64>,
    /// Override the frame's camera index.
    #[arg(long)]
    camera: Option<usize>,
    #[arg(long)]
    out_rgb: PathBuf,
    #[arg(long)]
    out_panoptic: PathBuf,
    /// Directory for per-instance marginal images (marginal_K.pgm).
    #[arg(long)]
    out_marginals: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Output path for the flat key=value report.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Preset name (see --help for the list).
    #[arg(long)]
    preset: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct MergeArgs {
    /// Input scene directories, one per view, in adjacency order.
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    scene: Option<PathBuf>,
}

fn configure_threads() -> Result<()> {
    if let Ok(value) = std::env::var("CIF_THREADS") {
        let count: usize = value
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("CIF_THREADS must be a number, got {value:?}")))?;
        if count > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(count)
                .build_global()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        }
    }
    Ok(())
}

/// Mean PSNR over the given frames, rendered at their own times and cameras.
fn split_psnr(
    set: &GaussianSet,
    field: &DeformationField,
    scene: &SceneDataset,
    indices: &[usize],
) -> Result<f64> {
    let mut total = 0.0;
    for &idx in indices {
        let frame = &scene.frames[idx];
        let buffers = render(
            set,
            field,
            &scene.cameras[frame.camera],
            frame.time,
            RenderOptions { contributions: false, cache: false },
        )?;
        total += psnr(&buffers.color, &frame.rgb);
    }
    Ok(total / indices.len().max(1) as f64)
}

fn run_train(args: TrainArgs) -> Result<()> {
    let scene = load_scene(&args.scene)?;
    let config = TrainConfig {
        iters_recon: args.iters_recon,
        iters_inst: args.iters_inst,
        lambda_inst: args.lambda_inst,
        resample_rate: args.resample_rate,
        resample_every: args.resample_every,
        gaussians: args.gaussians,
        seed: args.seed,
        log_every: args.log_every,
        shuffle_frames: args.shuffle_frames,
        enable_calibration: !args.no_calibration,
        enable_resampling: !args.no_resampling && args.resample_every > 0,
        resample_log: args.resample_log.clone(),
        quiet: args.quiet,
        ..TrainConfig::default()
    };

    let resume = match &args.ckpt {
        Some(path) => Some(TrainState::from_checkpoint(load_checkpoint(path)?)),
        None => None,
    };
    let state = match (args.stage, resume) {
        (Stage::Recon, Some(state)) => {
            cif::train::continue_reconstruction(&scene, &config, state)?
        }
        (Stage::Recon, None) => train_reconstruction(&scene, &config)?,
        (Stage::Instance, Some(state)) => train_instance(&scene, &config, state)?,
        (Stage::Instance, None) => {
            let state = cif::train::init_state(&scene, &config)?;
            train_instance(&scene, &config, state)?
        }
        (Stage::Full, Some(state)) => {
            let state = cif::train::continue_reconstruction(&scene, &config, state)?;
            train_instance(&scene, &config, state)?
        }
        (Stage::Full, None) => train_full(&scene, &config)?,
    };

    save_checkpoint(&args.out, &state.to_checkpoint())?;

    let test = scene.test_frames();
    if test.is_empty() {
        println!("final: no test frames to score");
        return Ok(());
    }
    let quality = split_psnr(&state.set, &state.field, &scene, &test)?;
    println!("final test PSNR {quality:.2} dB");
    if scene.instances > 0 {
        let report = evaluate(&state.set, &state.field, &scene, Split::Test)?;
        println!("final test mIoU {:.4}", report.miou);
    }
    Ok(())
}

/// Quantizes marginal maps to bytes such that each pixel's quantized masses
/// sum to at most 255, matching the exact-mass bound before rounding.
fn quantize_marginals(buffers: &cif::splat::RenderBuffers) -> Vec<Vec<u8>> {
    let k = buffers.instances;
    let pixels = buffers.pixel_count();
    let mut planes = vec![vec![0u8; pixels]; k];
    for idx in 0..pixels {
        let masses: Vec<f64> = (1..=k).map(|inst| 255.0 * buffers.marginal(inst, idx)).collect();
        let mut quantized: Vec<i64> = masses.iter().map(|&m| m.round() as i64).collect();
        // Rounding can push the sum above 255 even though the real masses
        // sum to at most 1; walk back the entries that rounded up the most.
        let mut excess: i64 = quantized.iter().sum::<i64>() - 255;
        while excess > 0 {
            let victim = (0..k)
                .filter(|&i| quantized[i] > 0)
                .max_by(|&a, &b| {
                    let ga = quantized[a] as f64 - masses[a];
                    let gb = quantized[b] as f64 - masses[b];
                    ga.partial_cmp(&gb).unwrap_or(std::cmp::Ordering::Equal)
                })
                .expect("positive excess requires a positive entry");
            quantized[victim] -= 1;
            excess -= 1;
        }
        for (inst, &q) in quantized.iter().enumerate() {
            planes[inst][idx] = q as u8;
        }
    }
    planes
}

fn run_render(args: RenderArgs) -> Result<()> {
    let ck = load_checkpoint(&args.ckpt)?;
    let scene = load_scene(&args.scene)?;
    if ck.set.instance_count != scene.instances {
        return Err(Error::Usage(format!(
            "checkpoint has {} instances, scene declares {}",
            ck.set.instance_count, scene.instances
        )));
    }
    let frame = scene
        .frames
        .get(args.frame)
        .ok_or_else(|| Error::InvalidArgument(format!("frame {} out of range", args.frame)))?;
    let camera_idx = args.camera.unwrap_or(frame.camera);
    let camera = scene
        .cameras
        .get(camera_idx)
        .ok_or_else(|| Error::InvalidArgument(format!("camera {camera_idx} out of range")))?;
    let time = args.time.unwrap_or(frame.time);

    let buffers = render(
        &ck.set,
        &ck.field,
        camera,
        time,
        RenderOptions { contributions: false, cache: false },
    )?;
    cif::data::netpbm::write_image_ppm(&args.out_rgb, camera.width, camera.height, &buffers.color)?;
    let labels = panoptic_map(&buffers);
    cif::data::netpbm::write_mask_pgm(&args.out_panoptic, camera.width, camera.height, &labels)?;

    if let Some(dir) = &args.out_marginals {
        std::fs::create_dir_all(dir)?;
        for (inst, plane) in quantize_marginals(&buffers).into_iter().enumerate() {
            let bytes = cif::data::netpbm::encode_pgm_bytes(camera.width, camera.height, &plane)?;
            std::fs::write(dir.join(format!("marginal_{}.pgm", inst + 1)), bytes)?;
        }
    }
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&args.ckpt)?;
    let scene = load_scene(&args.scene)?;
    if ck.set.instance_count != scene.instances {
        return Err(Error::Usage(format!(
            "checkpoint has {} instances, scene declares {}",
            ck.set.instance_count, scene.instances
        )));
    }
    let split = match args.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let report = evaluate(&ck.set, &ck.field, &scene, split)?;
    std::fs::write(&args.out, report.to_kv())?;
    print!("{report}");
    Ok(())
}

fn run_synth(args: SynthArgs) -> Result<()> {
    let spec = preset(&args.preset).map_err(|_| {
        Error::InvalidArgument(format!(
            "unknown preset {:?}; available: {}",
            args.preset,
            PRESETS.join(", ")
        ))
    })?;
    let (scene, _truth) = synth_scene(&spec, args.seed)?;
    write_scene(&scene, &args.out)?;
    println!(
        "wrote {} frames ({} train, {} test), {} instances to {}",
        scene.frames.len(),
        scene.train_frames().len(),
        scene.test_frames().len(),
        scene.instances,
        args.out.display()
    );
    Ok(())
}

fn run_merge(args: MergeArgs) -> Result<()> {
    let views: Vec<SceneDataset> =
        args.inputs.iter().map(|dir| load_scene(dir)).collect::<Result<_>>()?;
    let mut merged = zigzag_merge(&views)?;
    let retained = visibility_filter(&mut merged);
    write_scene(&merged, &args.out)?;
    println!(
        "merged {} views into {} frames; retained instances {:?} -> 1..={}",
        views.len(),
        merged.frames.len(),
        retained,
        merged.instances
    );
    Ok(())
}

fn run_inspect(args: InspectArgs) -> Result<()> {
    match (&args.ckpt, &args.scene) {
        (Some(path), _) => {
            let ck = load_checkpoint(path)?;
            println!("checkpoint {}", path.display());
            println!("  gaussians: {}", ck.set.len());
            println!("  instances: {}", ck.set.instance_count);
            println!("  iteration: {}", ck.iteration);
            println!("  field weights: {}", ck.field.weight_count());
        }
        (None, Some(dir)) => {
            let scene = load_scene(dir)?;
            println!("scene {}", dir.display());
            println!("  cameras: {}", scene.cameras.len());
            println!(
                "  frames: {} ({} train, {} test)",
                scene.frames.len(),
                scene.train_frames().len(),
                scene.test_frames().len()
            );
            println!("  instances: {}", scene.instances);
            let (lo, hi) = scene.bbox;
            println!("  bbox: [{}, {}, {}] .. [{}, {}, {}]", lo.x, lo.y, lo.z, hi.x, hi.y, hi.z);
        }
        (None, None) => {
            return Err(Error::Usage("inspect needs --ckpt or --scene".into()));
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Train(args) => run_train(args),
        Command::Render(args) => run_render(args),
        Command::Eval(args) => run_eval(args),
        Command::Synth(args) => run_synth(args),
        Command::MergeViews(args) => run_merge(args),
        Command::Inspect(args) => run_inspect(args),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
