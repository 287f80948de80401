//! Scene ingestion and dataset plumbing.
//!
//! A scene directory holds `scene.json` plus `rgb/*.ppm` color frames and
//! `mask/*.pgm` label masks. The manifest lists cameras (intrinsics and a
//! row-major 3x4 world-to-camera matrix), frames (image paths, camera index,
//! time, optional split tag), an optional instance count, and an optional
//! scene bounding box.
//!
//! Multi-view footage becomes a single pseudo-monocular sequence via
//! [`zigzag_merge`] (alternating forward/reversed view order to keep the
//! merged sequence temporally continuous) followed by [`visibility_filter`]
//! (instances must be visible in every view to stay labeled).

pub mod netpbm;
pub mod synth;

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};

/// Train/test membership of a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// One observed frame: a color image, its instance mask, and when/where it
/// was taken.
#[derive(Debug, Clone)]
pub struct FrameObservation {
    /// Normalized capture time in `[0, 1]`.
    pub time: f64,
    /// Index into [`SceneDataset::cameras`].
    pub camera: usize,
    /// Row-major `H*W*3` color values in `[0, 1]`.
    pub rgb: Vec<f64>,
    /// Row-major `H*W` labels, `0` = background.
    pub labels: Vec<u16>,
    pub split: Split,
}

/// A fully loaded scene.
#[derive(Debug, Clone)]
pub struct SceneDataset {
    pub cameras: Vec<Camera>,
    pub frames: Vec<FrameObservation>,
    /// Number of instance classes `K`; labels range over `0..=K`.
    pub instances: usize,
    /// Axis-aligned scene bounds `(low, high)`.
    pub bbox: (Vector3<f64>, Vector3<f64>),
}

impl SceneDataset {
    pub fn frames_in(&self, split: Split) -> Vec<usize> {
        self.frames
            .iter()
            .enumerate()
            .filter(|(_, f)| f.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn train_frames(&self) -> Vec<usize> {
        self.frames_in(Split::Train)
    }

    pub fn test_frames(&self) -> Vec<usize> {
        self.frames_in(Split::Test)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CameraManifest {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    /// Row-major 3x4 `[R | t]` world-to-camera matrix.
    world_to_camera: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameManifest {
    rgb: String,
    mask: String,
    camera: usize,
    time: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    split: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneManifest {
    #[serde(skip_serializing_if = "Option::is_none")]
    instances: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bbox: Option<[[f64; 3]; 2]>,
    cameras: Vec<CameraManifest>,
    frames: Vec<FrameManifest>,
}

fn camera_from_manifest(manifest: &CameraManifest) -> Result<Camera> {
    if manifest.world_to_camera.len() != 12 {
        return Err(Error::SceneFormat(format!(
            "world_to_camera needs 12 entries (row-major 3x4), got {}",
            manifest.world_to_camera.len()
        )));
    }
    let m = &manifest.world_to_camera;
    let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
    let translation = Vector3::new(m[3], m[7], m[11]);
    Camera::new(
        manifest.fx,
        manifest.fy,
        manifest.cx,
        manifest.cy,
        manifest.width,
        manifest.height,
        rotation,
        translation,
    )
}

fn camera_to_manifest(camera: &Camera) -> CameraManifest {
    let r = camera.rotation();
    let t = camera.translation();
    let mut world_to_camera = Vec::with_capacity(12);
    for row in 0..3 {
        for col in 0..3 {
            world_to_camera.push(r[(row, col)]);
        }
        world_to_camera.push(t[row]);
    }
    CameraManifest {
        fx: camera.fx,
        fy: camera.fy,
        cx: camera.cx,
        cy: camera.cy,
        width: camera.width,
        height: camera.height,
        world_to_camera,
    }
}

fn parse_split(tag: &str) -> Result<Split> {
    match tag {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(Error::SceneFormat(format!("unknown split tag {other:?}"))),
    }
}

/// Loads and validates a scene directory.
///
/// Frame times must be non-decreasing within each camera; they are rescaled
/// to `[0, 1]` if the manifest uses another range. When no frame carries a
/// split tag, every 8th frame becomes the test split.
pub fn load_scene(dir: &Path) -> Result<SceneDataset> {
    let manifest_path = dir.join("scene.json");
    let manifest: SceneManifest = serde_json::from_slice(&std::fs::read(&manifest_path)?)
        .map_err(|e| Error::SceneFormat(format!("{}: {e}", manifest_path.display())))?;

    if manifest.cameras.is_empty() {
        return Err(Error::SceneFormat("manifest lists no cameras".into()));
    }
    let cameras: Vec<Camera> =
        manifest.cameras.iter().map(camera_from_manifest).collect::<Result<_>>()?;

    // Validate camera references and per-view time ordering before touching
    // any image file.
    let mut last_time: Vec<Option<f64>> = vec![None; cameras.len()];
    for (idx, frame) in manifest.frames.iter().enumerate() {
        if frame.camera >= cameras.len() {
            return Err(Error::SceneFormat(format!(
                "frame {idx} references camera {} of {}",
                frame.camera,
                cameras.len()
            )));
        }
        if !frame.time.is_finite() {
            return Err(Error::SceneFormat(format!("frame {idx} has non-finite time")));
        }
        if let Some(prev) = last_time[frame.camera] {
            if frame.time < prev {
                return Err(Error::SceneFormat(format!(
                    "times go backward within camera {}: {} after {prev}",
                    frame.camera, frame.time
                )));
            }
        }
        last_time[frame.camera] = Some(frame.time);
    }

    let any_tagged = manifest.frames.iter().any(|f| f.split.is_some());
    let declared = manifest.instances;

    let mut frames: Vec<FrameObservation> = manifest
        .frames
        .par_iter()
        .enumerate()
        .map(|(idx, fm)| {
            let camera = &cameras[fm.camera];
            let (w, h, rgb) = netpbm::read_image_ppm(&dir.join(&fm.rgb))?;
            if (w, h) != (camera.width, camera.height) {
                return Err(Error::ShapeMismatch(format!(
                    "{}: image is {w}x{h}, camera {} expects {}x{}",
                    fm.rgb, fm.camera, camera.width, camera.height
                )));
            }
            let (mw, mh, labels) = netpbm::read_mask_pgm(&dir.join(&fm.mask))?;
            if (mw, mh) != (camera.width, camera.height) {
                return Err(Error::ShapeMismatch(format!(
                    "{}: mask is {mw}x{mh}, camera {} expects {}x{}",
                    fm.mask, fm.camera, camera.width, camera.height
                )));
            }
            if let Some(k) = declared {
                if let Some(&label) = labels.iter().find(|&&l| usize::from(l) > k) {
                    return Err(Error::LabelOverflow {
                        label: u32::from(label),
                        declared: k as u32,
                    });
                }
            }
            let split = match &fm.split {
                Some(tag) => parse_split(tag)?,
                None if any_tagged => Split::Train,
                None => {
                    if idx % 8 == 0 {
                        Split::Test
                    } else {
                        Split::Train
                    }
                }
            };
            Ok(FrameObservation { time: fm.time, camera: fm.camera, rgb, labels, split })
        })
        .collect::<Result<_>>()?;

    // Rescale times only when the manifest range leaves [0, 1].
    let t_min = frames.iter().map(|f| f.time).fold(f64::INFINITY, f64::min);
    let t_max = frames.iter().map(|f| f.time).fold(f64::NEG_INFINITY, f64::max);
    if !frames.is_empty() && (t_min < 0.0 || t_max > 1.0) {
        let span = t_max - t_min;
        for frame in &mut frames {
            frame.time = if span > 0.0 { (frame.time - t_min) / span } else { 0.0 };
        }
    }

    let max_label = frames
        .iter()
        .flat_map(|f| f.labels.iter().copied())
        .max()
        .unwrap_or(0);
    let instances = declared.unwrap_or(usize::from(max_label));

    let bbox = match manifest.bbox {
        Some([lo, hi]) => {
            let lo = Vector3::from(lo);
            let hi = Vector3::from(hi);
            if lo.iter().zip(hi.iter()).any(|(l, h)| l >= h) {
                return Err(Error::SceneFormat("bbox low corner must be below high corner".into()));
            }
            (lo, hi)
        }
        None => (Vector3::new(-1.0, -1.0, -1.0), Vector3::new(1.0, 1.0, 1.0)),
    };

    Ok(SceneDataset { cameras, frames, instances, bbox })
}

/// Writes a scene directory (`scene.json`, `rgb/`, `mask/`) that
/// [`load_scene`] reproduces exactly for 8-bit image data.
pub fn write_scene(scene: &SceneDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("rgb"))?;
    std::fs::create_dir_all(dir.join("mask"))?;
    let mut frames = Vec::with_capacity(scene.frames.len());
    for (idx, frame) in scene.frames.iter().enumerate() {
        let camera = &scene.cameras[frame.camera];
        let rgb_rel = format!("rgb/frame_{idx:04}.ppm");
        let mask_rel = format!("mask/frame_{idx:04}.pgm");
        netpbm::write_image_ppm(&dir.join(&rgb_rel), camera.width, camera.height, &frame.rgb)?;
        netpbm::write_mask_pgm(&dir.join(&mask_rel), camera.width, camera.height, &frame.labels)?;
        frames.push(FrameManifest {
            rgb: rgb_rel,
            mask: mask_rel,
            camera: frame.camera,
            time: frame.time,
            split: Some(
                match frame.split {
                    Split::Train => "train",
                    Split::Test => "test",
                }
                .to_string(),
            ),
        });
    }
    let manifest = SceneManifest {
        instances: Some(scene.instances),
        bbox: Some([
            [scene.bbox.0.x, scene.bbox.0.y, scene.bbox.0.z],
            [scene.bbox.1.x, scene.bbox.1.y, scene.bbox.1.z],
        ]),
        cameras: scene.cameras.iter().map(camera_to_manifest).collect(),
        frames,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::SceneFormat(format!("manifest serialization: {e}")))?;
    std::fs::write(dir.join("scene.json"), json)?;
    Ok(())
}

/// Merges N same-length views into one pseudo-monocular sequence: view 0
/// forward, view 1 reversed, view 2 forward, ... so consecutive output frames
/// stay temporally adjacent. Cameras are concatenated and frame camera
/// indices re-based; every frame keeps its original camera and time.
pub fn zigzag_merge(views: &[SceneDataset]) -> Result<SceneDataset> {
    if views.is_empty() {
        return Err(Error::Usage("need at least one view to merge".into()));
    }
    let frame_count = views[0].frames.len();
    if views.iter().any(|v| v.frames.len() != frame_count) {
        return Err(Error::SceneFormat(format!(
            "views disagree on frame count: {:?}",
            views.iter().map(|v| v.frames.len()).collect::<Vec<_>>()
        )));
    }

    let mut cameras = Vec::new();
    let mut frames = Vec::new();
    let mut lo = Vector3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut hi = Vector3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (view_idx, view) in views.iter().enumerate() {
        let camera_base = cameras.len();
        cameras.extend(view.cameras.iter().cloned());
        lo = lo.inf(&view.bbox.0);
        hi = hi.sup(&view.bbox.1);
        let mut ordered: Vec<&FrameObservation> = view.frames.iter().collect();
        if view_idx % 2 == 1 {
            ordered.reverse();
        }
        frames.extend(ordered.into_iter().map(|f| {
            let mut f = f.clone();
            f.camera += camera_base;
            f
        }));
    }
    let instances = views.iter().map(|v| v.instances).max().unwrap_or(0);
    Ok(SceneDataset { cameras, frames, instances, bbox: (lo, hi) })
}

/// Keeps only instances whose mask support is non-empty in every view (view =
/// distinct camera index). Dropped labels become background; survivors are
/// re-densified to `1..=K'` preserving relative order. Returns the original
/// labels that survived, ascending.
pub fn visibility_filter(scene: &mut SceneDataset) -> Vec<u16> {
    let views: Vec<usize> = {
        let mut seen: Vec<usize> = scene.frames.iter().map(|f| f.camera).collect();
        seen.sort_unstable();
        seen.dedup();
        seen
    };
    // support[label] = set of views where the label appears.
    let mut support: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for frame in &scene.frames {
        for &label in &frame.labels {
            if label > 0 {
                let entry = support.entry(label).or_default();
                if entry.last() != Some(&frame.camera) && !entry.contains(&frame.camera) {
                    entry.push(frame.camera);
                }
            }
        }
    }
    let retained: Vec<u16> = support
        .iter()
        .filter(|(_, cams)| cams.len() == views.len())
        .map(|(&label, _)| label)
        .collect();

    let mut remap = vec![0u16; usize::from(scene.instances as u16) + 1];
    for (new_label, &old_label) in retained.iter().enumerate() {
        if usize::from(old_label) < remap.len() {
            remap[usize::from(old_label)] = (new_label + 1) as u16;
        }
    }
    for frame in &mut scene.frames {
        for label in &mut frame.labels {
            *label = remap.get(usize::from(*label)).copied().unwrap_or(0);
        }
    }
    scene.instances = retained.len();
    retained
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Camera;

    fn test_camera(width: usize, height: usize) -> Camera {
        Camera::axis_aligned(
            0.9 * width as f64,
            0.9 * width as f64,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
        )
        .unwrap()
    }

    fn frame(camera: usize, time: f64, labels: Vec<u16>, split: Split) -> FrameObservation {
        let rgb = vec![0.25; labels.len() * 3];
        FrameObservation { time, camera, rgb, labels, split }
    }

    fn view(camera: Camera, times: &[f64], labels: &[Vec<u16>]) -> SceneDataset {
        let frames = times
            .iter()
            .zip(labels)
            .map(|(&t, l)| frame(0, t, l.clone(), Split::Train))
            .collect();
        let max = labels.iter().flatten().copied().max().unwrap_or(0);
        SceneDataset {
            cameras: vec![camera],
            frames,
            instances: usize::from(max),
            bbox: (Vector3::new(-1.0, -1.0, -1.0), Vector3::new(1.0, 1.0, 1.0)),
        }
    }

    #[test]
    fn zigzag_two_views_three_frames() {
        let cam = test_camera(2, 1);
        let a = view(cam.clone(), &[0.0, 0.5, 1.0], &[vec![1, 0], vec![1, 1], vec![0, 1]]);
        let b = view(cam.clone(), &[0.0, 0.5, 1.0], &[vec![0, 0], vec![1, 0], vec![1, 1]]);
        let merged = zigzag_merge(&[a, b]).unwrap();
        // First view forward, second reversed.
        let times: Vec<f64> = merged.frames.iter().map(|f| f.time).collect();
        assert_eq!(times, vec![0.0, 0.5, 1.0, 1.0, 0.5, 0.0]);
        let cams: Vec<usize> = merged.frames.iter().map(|f| f.camera).collect();
        assert_eq!(cams, vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(merged.frames[3].labels, vec![1, 1]);
        assert_eq!(merged.cameras.len(), 2);
    }

    #[test]
    fn zigzag_three_views_two_frames_and_identity() {
        let cam = test_camera(1, 1);
        let mk = |t0: u16, t1: u16| {
            view(cam.clone(), &[0.0, 1.0], &[vec![t0], vec![t1]])
        };
        let merged = zigzag_merge(&[mk(1, 2), mk(3, 4), mk(5, 6)]).unwrap();
        let labels: Vec<u16> = merged.frames.iter().map(|f| f.labels[0]).collect();
        // Forward, reversed, forward.
        assert_eq!(labels, vec![1, 2, 4, 3, 5, 6]);

        let single = mk(7, 8);
        let out = zigzag_merge(std::slice::from_ref(&single)).unwrap();
        let labels: Vec<u16> = out.frames.iter().map(|f| f.labels[0]).collect();
        assert_eq!(labels, vec![7, 8]);
    }

    #[test]
    fn zigzag_preserves_frame_multiset_and_rejects_ragged_input() {
        let cam = test_camera(1, 1);
        for (n, t) in [(2usize, 4usize), (4, 3), (5, 1)] {
            let views: Vec<SceneDataset> = (0..n)
                .map(|v| {
                    let times: Vec<f64> = (0..t).map(|i| i as f64 / t.max(2) as f64).collect();
                    let labels: Vec<Vec<u16>> =
                        (0..t).map(|i| vec![(v * t + i) as u16]).collect();
                    view(cam.clone(), &times, &labels)
                })
                .collect();
            let merged = zigzag_merge(&views).unwrap();
            assert_eq!(merged.frames.len(), n * t);
            let mut got: Vec<u16> = merged.frames.iter().map(|f| f.labels[0]).collect();
            got.sort_unstable();
            let want: Vec<u16> = (0..(n * t) as u16).collect();
            assert_eq!(got, want);
        }

        let a = view(cam.clone(), &[0.0], &[vec![0]]);
        let b = view(cam.clone(), &[0.0, 1.0], &[vec![0], vec![0]]);
        assert!(zigzag_merge(&[a, b]).is_err());
    }

    #[test]
    fn visibility_filter_drops_and_redensifies() {
        let cam = test_camera(2, 1);
        // Two views: label 1 in both, label 2 only in view 0, label 3 in both.
        let mut scene = SceneDataset {
            cameras: vec![cam.clone(), cam.clone()],
            frames: vec![
                frame(0, 0.0, vec![1, 2], Split::Train),
                frame(0, 0.5, vec![3, 0], Split::Train),
                frame(1, 0.0, vec![1, 3], Split::Train),
            ],
            instances: 3,
            bbox: (Vector3::new(-1.0, -1.0, -1.0), Vector3::new(1.0, 1.0, 1.0)),
        };
        let retained = visibility_filter(&mut scene);
        assert_eq!(retained, vec![1, 3]);
        assert_eq!(scene.instances, 2);
        assert_eq!(scene.frames[0].labels, vec![1, 0]);
        // Label 3 survives with the next dense label, preserving order.
        assert_eq!(scene.frames[1].labels, vec![2, 0]);
        assert_eq!(scene.frames[2].labels, vec![1, 2]);

        // Idempotence.
        let snapshot: Vec<Vec<u16>> = scene.frames.iter().map(|f| f.labels.clone()).collect();
        let retained_again = visibility_filter(&mut scene);
        assert_eq!(retained_again, vec![1, 2]);
        let after: Vec<Vec<u16>> = scene.frames.iter().map(|f| f.labels.clone()).collect();
        assert_eq!(after, snapshot);
        assert_eq!(scene.instances, 2);
    }

    #[test]
    fn scene_round_trip_is_pixel_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cam = test_camera(3, 2);
        let mut scene = view(
            cam,
            &[0.0, 0.4, 1.0],
            &[vec![0, 1, 0, 0, 2, 0], vec![1, 1, 0, 0, 2, 2], vec![0, 0, 0, 1, 0, 0]],
        );
        // Give the images 8-bit-exact nontrivial content.
        for (i, frame) in scene.frames.iter_mut().enumerate() {
            for (j, v) in frame.rgb.iter_mut().enumerate() {
                *v = ((i * 37 + j * 11) % 256) as f64 / 255.0;
            }
        }
        scene.frames[2].split = Split::Test;
        write_scene(&scene, dir.path()).unwrap();
        let loaded = load_scene(dir.path()).unwrap();
        assert_eq!(loaded.frames.len(), 3);
        assert_eq!(loaded.instances, 2);
        for (a, b) in loaded.frames.iter().zip(&scene.frames) {
            assert_eq!(a.rgb, b.rgb);
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.split, b.split);
            assert_eq!(a.time, b.time);
            assert_eq!(a.camera, b.camera);
        }
        assert_eq!(loaded.bbox, scene.bbox);
        // Second round trip reproduces the manifest byte-for-byte.
        let dir2 = tempfile::tempdir().unwrap();
        write_scene(&loaded, dir2.path()).unwrap();
        assert_eq!(
            std::fs::read(dir.path().join("scene.json")).unwrap(),
            std::fs::read(dir2.path().join("scene.json")).unwrap()
        );
    }

    #[test]
    fn load_validates_labels_times_and_references() {
        let dir = tempfile::tempdir().unwrap();
        let cam = test_camera(2, 1);
        let scene = view(cam, &[0.0, 1.0], &[vec![0, 5], vec![1, 0]]);
        write_scene(&scene, dir.path()).unwrap();

        // Declared K below an observed label.
        let manifest_path = dir.path().join("scene.json");
        let text = std::fs::read_to_string(&manifest_path).unwrap();
        let lowered = text.replace("\"instances\": 5", "\"instances\": 3");
        std::fs::write(&manifest_path, &lowered).unwrap();
        match load_scene(dir.path()) {
            Err(Error::LabelOverflow { label: 5, declared: 3 }) => {}
            other => panic!("expected label overflow, got {other:?}"),
        }

        // Backward time within a camera.
        let backward = text.replace("\"time\": 1.0", "\"time\": -1.0");
        std::fs::write(&manifest_path, &backward).unwrap();
        assert!(matches!(load_scene(dir.path()), Err(Error::SceneFormat(_))));

        // Out-of-range camera index.
        let bad_cam = text.replace("\"camera\": 0", "\"camera\": 7");
        std::fs::write(&manifest_path, &bad_cam).unwrap();
        assert!(matches!(load_scene(dir.path()), Err(Error::SceneFormat(_))));

        // Missing manifest is an I/O error.
        std::fs::remove_file(&manifest_path).unwrap();
        assert!(matches!(load_scene(dir.path()), Err(Error::Io(_))));
    }

    #[test]
    fn load_rescales_out_of_range_times_and_autosplits() {
        let dir = tempfile::tempdir().unwrap();
        let cam = test_camera(1, 1);
        let labels: Vec<Vec<u16>> = (0..9).map(|_| vec![1]).collect();
        let times: Vec<f64> = (0..9).map(|i| i as f64 * 10.0).collect();
        let scene = view(cam, &times, &labels);
        write_scene(&scene, dir.path()).unwrap();
        // Strip the split tags so the loader applies the every-8th rule.
        let manifest_path = dir.path().join("scene.json");
        let text = std::fs::read_to_string(&manifest_path).unwrap();
        let untagged = text.replace(",\n      \"split\": \"train\"", "");
        assert_ne!(text, untagged);
        std::fs::write(&manifest_path, untagged).unwrap();

        let loaded = load_scene(dir.path()).unwrap();
        let times: Vec<f64> = loaded.frames.iter().map(|f| f.time).collect();
        assert_eq!(times[0], 0.0);
        assert_eq!(*times.last().unwrap(), 1.0);
        assert!(times.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(loaded.test_frames(), vec![0, 8]);
        assert_eq!(loaded.train_frames().len(), 7);
    }
}
