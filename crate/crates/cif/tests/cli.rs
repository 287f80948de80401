//! End-to-end checks of the `cif` binary: synth -> train -> render -> eval
//! round trips, determinism of checkpoints, merge-views, and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn cif() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cif"));
    // Keep runs reproducible and modest on shared machines.
    cmd.env("CIF_THREADS", "1");
    cmd
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary should spawn");
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_expect_code(cmd: &mut Command, code: i32) -> Output {
    let out = cmd.output().expect("binary should spawn");
    assert_eq!(
        out.status.code(),
        Some(code),
        "command {:?} expected exit {code}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn synth_scene(dir: &Path, preset: &str, seed: u64) -> PathBuf {
    let scene = dir.join(format!("{preset}-{seed}"));
    run_ok(cif().args([
        "synth",
        "--preset",
        preset,
        "--out",
        scene.to_str().unwrap(),
        "--seed",
        &seed.to_string(),
    ]));
    scene
}

fn train_tiny(scene: &Path, out: &Path, seed: u64, extra: &[&str]) -> Output {
    let mut cmd = cif();
    cmd.args([
        "train",
        "--scene",
        scene.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--iters-recon",
        "120",
        "--iters-inst",
        "60",
        "--gaussians",
        "96",
        "--resample-every",
        "25",
        "--seed",
        &seed.to_string(),
        "--quiet",
    ]);
    cmd.args(extra);
    run_ok(&mut cmd)
}

#[test]
fn synth_train_render_eval_round_trip() {
    let tmp = TempDir::new().unwrap();
    let scene = synth_scene(tmp.path(), "blobs2-static", 11);
    assert!(scene.join("scene.json").is_file());

    let ckpt = tmp.path().join("model.ckpt");
    let out = train_tiny(&scene, &ckpt, 5, &[]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("final test PSNR"), "missing summary: {stdout}");
    assert!(stdout.contains("final test mIoU"), "missing summary: {stdout}");

    let rgb = tmp.path().join("frame.ppm");
    let pan = tmp.path().join("frame.pgm");
    let marginals = tmp.path().join("marginals");
    run_ok(cif().args([
        "render",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--scene",
        scene.to_str().unwrap(),
        "--frame",
        "0",
        "--out-rgb",
        rgb.to_str().unwrap(),
        "--out-panoptic",
        pan.to_str().unwrap(),
        "--out-marginals",
        marginals.to_str().unwrap(),
    ]));

    let (w, h, pixels) = cif::data::netpbm::read_image_ppm(&rgb).unwrap();
    assert_eq!((w, h), (32, 32));
    assert_eq!(pixels.len(), 32 * 32 * 3);
    let (_, _, labels) = cif::data::netpbm::read_mask_pgm(&pan).unwrap();
    assert!(labels.iter().all(|&l| l <= 2), "panoptic labels stay within K");

    // Quantized marginals never overshoot full probability mass per pixel.
    let mut sums = vec![0u32; 32 * 32];
    for inst in 1..=2 {
        let path = marginals.join(format!("marginal_{inst}.pgm"));
        let (_, _, plane) = cif::data::netpbm::read_mask_pgm(&path).unwrap();
        for (s, &v) in sums.iter_mut().zip(&plane) {
            *s += u32::from(v);
        }
    }
    assert!(sums.iter().all(|&s| s <= 255));

    let report_path = tmp.path().join("report.txt");
    let out = run_ok(cif().args([
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--scene",
        scene.to_str().unwrap(),
        "--split",
        "test",
        "--out",
        report_path.to_str().unwrap(),
    ]));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("mIoU"), "human table printed: {table}");
    let report = std::fs::read_to_string(&report_path).unwrap();
    for key in ["frames=", "macc_pix=", "macc_inst=", "miou=", "iou_instance_1="] {
        assert!(report.contains(key), "report missing {key}:\n{report}");
    }

    let out = run_ok(cif().args(["inspect", "--ckpt", ckpt.to_str().unwrap()]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("gaussians: 96"), "inspect summary: {stdout}");
    assert!(stdout.contains("instances: 2"), "inspect summary: {stdout}");
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let tmp = TempDir::new().unwrap();
    let scene = synth_scene(tmp.path(), "blobs2-static", 3);
    let a = tmp.path().join("a.ckpt");
    let b = tmp.path().join("b.ckpt");
    let c = tmp.path().join("c.ckpt");
    train_tiny(&scene, &a, 42, &[]);
    train_tiny(&scene, &b, 42, &[]);
    train_tiny(&scene, &c, 43, &[]);
    let bytes_a = std::fs::read(&a).unwrap();
    let bytes_b = std::fs::read(&b).unwrap();
    let bytes_c = std::fs::read(&c).unwrap();
    assert_eq!(bytes_a, bytes_b, "same seed must reproduce the checkpoint bit for bit");
    assert_ne!(bytes_a, bytes_c, "different seeds should diverge");
}

#[test]
fn zero_iterations_save_the_initial_state() {
    let tmp = TempDir::new().unwrap();
    let scene = synth_scene(tmp.path(), "blobs2-static", 9);
    let ckpt = tmp.path().join("init.ckpt");
    run_ok(cif().args([
        "train",
        "--scene",
        scene.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--stage",
        "recon",
        "--iters-recon",
        "0",
        "--gaussians",
        "64",
        "--quiet",
    ]));
    let out = run_ok(cif().args(["inspect", "--ckpt", ckpt.to_str().unwrap()]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("iteration: 0"), "untrained state: {stdout}");
    assert!(stdout.contains("gaussians: 64"), "initial population: {stdout}");
}

#[test]
fn resume_continues_from_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let scene = synth_scene(tmp.path(), "blobs2-static", 21);
    let first = tmp.path().join("first.ckpt");
    let second = tmp.path().join("second.ckpt");
    run_ok(cif().args([
        "train",
        "--scene",
        scene.to_str().unwrap(),
        "--out",
        first.to_str().unwrap(),
        "--stage",
        "recon",
        "--iters-recon",
        "40",
        "--gaussians",
        "64",
        "--quiet",
    ]));
    run_ok(cif().args([
        "train",
        "--scene",
        scene.to_str().unwrap(),
        "--ckpt",
        first.to_str().unwrap(),
        "--out",
        second.to_str().unwrap(),
        "--stage",
        "recon",
        "--iters-recon",
        "40",
        "--gaussians",
        "64",
        "--quiet",
    ]));
    let out = run_ok(cif().args(["inspect", "--ckpt", first.to_str().unwrap()]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("iteration: 40"), "first leg stops at 40: {stdout}");
    // Each invocation runs its stage for the requested number of iterations;
    // the checkpoint's counter accumulates across resumes.
    let out = run_ok(cif().args(["inspect", "--ckpt", second.to_str().unwrap()]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("iteration: 80"), "resumed leg adds 40 more: {stdout}");
}

#[test]
fn merge_views_builds_zigzag_scene() {
    let tmp = TempDir::new().unwrap();
    let left = synth_scene(tmp.path(), "blobs2-static", 1);
    let right = synth_scene(tmp.path(), "blobs2-static", 2);
    let merged = tmp.path().join("merged");
    let out = run_ok(cif().args([
        "merge-views",
        "--in",
        left.to_str().unwrap(),
        right.to_str().unwrap(),
        "--out",
        merged.to_str().unwrap(),
    ]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("merged 2 views into 16 frames"), "summary: {stdout}");

    let out = run_ok(cif().args(["inspect", "--scene", merged.to_str().unwrap()]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("frames: 16"), "merged scene: {stdout}");
    assert!(stdout.contains("cameras: 16"), "cameras re-based per view: {stdout}");
}

#[test]
fn bad_inputs_exit_with_code_two() {
    let tmp = TempDir::new().unwrap();
    run_expect_code(
        cif().args(["synth", "--preset", "no-such-preset", "--out", tmp.path().to_str().unwrap()]),
        2,
    );
    run_expect_code(
        cif().args([
            "train",
            "--scene",
            tmp.path().join("missing").to_str().unwrap(),
            "--out",
            tmp.path().join("x.ckpt").to_str().unwrap(),
        ]),
        2,
    );
    run_expect_code(cif().args(["inspect"]), 2);

    // A frame index past the end of the dataset is a usage problem too.
    let scene = synth_scene(tmp.path(), "blobs2-static", 4);
    let ckpt = tmp.path().join("tiny.ckpt");
    run_ok(cif().args([
        "train",
        "--scene",
        scene.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--stage",
        "recon",
        "--iters-recon",
        "0",
        "--gaussians",
        "16",
        "--quiet",
    ]));
    run_expect_code(
        cif().args([
            "render",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--scene",
            scene.to_str().unwrap(),
            "--frame",
            "999",
            "--out-rgb",
            tmp.path().join("r.ppm").to_str().unwrap(),
            "--out-panoptic",
            tmp.path().join("p.pgm").to_str().unwrap(),
        ]),
        2,
    );
}
