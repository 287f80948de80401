//! Panoptic label extraction and the three segmentation metrics.
//!
//! A rendered frame carries a per-pixel distribution over background residual
//! and instance marginals; [`panoptic_map`] collapses it to hard labels by
//! argmax. Metrics compare predicted label maps against ground truth:
//!
//! * `mAcc-pix` — per frame, fraction of all pixels (background included)
//!   whose predicted label matches; mean over frames.
//! * `mAcc-inst` — per frame, accuracy over each ground-truth instance's own
//!   pixels, averaged with equal weight per instance regardless of size;
//!   mean over frames that contain at least one instance.
//! * `mIoU` — per frame, intersection-over-union of predicted vs ground-truth
//!   masks for each ground-truth-present instance; mean over instances, then
//!   over contributing frames. Background is never an "instance" here.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;

use crate::data::{SceneDataset, Split};
use crate::deform::DeformationField;
use crate::error::{Error, Result};
use crate::gaussians::GaussianSet;
use crate::splat::{render, RenderBuffers, RenderOptions};

/// Collapses per-pixel instance distributions to hard labels: label 0 for the
/// background residual, `k` for marginal `M_k`. Ties keep the lowest label.
pub fn panoptic_map(buffers: &RenderBuffers) -> Vec<u16> {
    let k = buffers.instances;
    (0..buffers.pixel_count())
        .map(|idx| {
            let mut best = buffers.residual[idx];
            let mut label = 0u16;
            for instance in 1..=k {
                let mass = buffers.marginal(instance, idx);
                if mass > best {
                    best = mass;
                    label = instance as u16;
                }
            }
            label
        })
        .collect()
}

fn check_shapes(pred: &[Vec<u16>], gt: &[Vec<u16>]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predicted frames vs {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        if p.len() != g.len() {
            return Err(Error::ShapeMismatch(format!(
                "frame {i}: {} predicted pixels vs {} ground-truth pixels",
                p.len(),
                g.len()
            )));
        }
    }
    Ok(())
}

fn frame_macc_pix(pred: &[u16], gt: &[u16]) -> f64 {
    let correct = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    correct as f64 / pred.len().max(1) as f64
}

fn present_instances(gt: &[u16]) -> Vec<u16> {
    let mut seen = BTreeMap::new();
    for &label in gt {
        if label > 0 {
            *seen.entry(label).or_insert(0usize) += 1;
        }
    }
    seen.into_keys().collect()
}

/// Accuracy over the pixels of one ground-truth instance.
fn frame_instance_accuracy(pred: &[u16], gt: &[u16], instance: u16) -> f64 {
    let mut total = 0usize;
    let mut correct = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        if g == instance {
            total += 1;
            if p == instance {
                correct += 1;
            }
        }
    }
    correct as f64 / total.max(1) as f64
}

/// Intersection-over-union of the full-frame label-`instance` masks.
fn frame_instance_iou(pred: &[u16], gt: &[u16], instance: u16) -> f64 {
    let mut intersection = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        let in_pred = p == instance;
        let in_gt = g == instance;
        if in_pred && in_gt {
            intersection += 1;
        }
        if in_pred || in_gt {
            union += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        intersection as f64 / union as f64
    }
}

/// Mean pixel accuracy over frames (every pixel scored, background included).
pub fn macc_pix(pred: &[Vec<u16>], gt: &[Vec<u16>]) -> Result<f64> {
    check_shapes(pred, gt)?;
    if pred.is_empty() {
        return Err(Error::Usage("no frames to score".into()));
    }
    let sum: f64 = pred.iter().zip(gt).map(|(p, g)| frame_macc_pix(p, g)).sum();
    Ok(sum / pred.len() as f64)
}

/// Size-agnostic mean per-instance accuracy: mean over ground-truth-present
/// instances within a frame, then over frames that contain instances.
pub fn macc_inst(pred: &[Vec<u16>], gt: &[Vec<u16>]) -> Result<f64> {
    check_shapes(pred, gt)?;
    let mut frame_values = Vec::new();
    for (p, g) in pred.iter().zip(gt) {
        let present = present_instances(g);
        if present.is_empty() {
            continue;
        }
        let sum: f64 = present.iter().map(|&k| frame_instance_accuracy(p, g, k)).sum();
        frame_values.push(sum / present.len() as f64);
    }
    if frame_values.is_empty() {
        return Err(Error::Usage("no frame contains an instance".into()));
    }
    Ok(frame_values.iter().sum::<f64>() / frame_values.len() as f64)
}

/// Mean intersection-over-union: per-frame mean over ground-truth-present
/// instances, then mean over frames that contain instances.
pub fn miou(pred: &[Vec<u16>], gt: &[Vec<u16>]) -> Result<f64> {
    check_shapes(pred, gt)?;
    let mut frame_values = Vec::new();
    for (p, g) in pred.iter().zip(gt) {
        let present = present_instances(g);
        if present.is_empty() {
            continue;
        }
        let sum: f64 = present.iter().map(|&k| frame_instance_iou(p, g, k)).sum();
        frame_values.push(sum / present.len() as f64);
    }
    if frame_values.is_empty() {
        return Err(Error::Usage("no frame contains an instance".into()));
    }
    Ok(frame_values.iter().sum::<f64>() / frame_values.len() as f64)
}

/// Per-frame metric breakdown. The instance-averaged values are `None` for
/// frames whose ground truth contains no instance pixels; such frames are
/// excluded from the instance-averaged aggregates.
#[derive(Debug, Clone)]
pub struct FrameMetrics {
    /// Index of the frame within the dataset.
    pub frame: usize,
    pub macc_pix: f64,
    pub macc_inst: Option<f64>,
    pub miou: Option<f64>,
}

/// Aggregated segmentation metrics over an evaluation split.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub macc_pix: f64,
    pub macc_inst: f64,
    pub miou: f64,
    /// Mean IoU per instance over the frames where it appears, ascending.
    pub per_instance_iou: Vec<(u16, f64)>,
    pub per_frame: Vec<FrameMetrics>,
    /// Number of frames evaluated.
    pub frames: usize,
}

impl MetricReport {
    /// Flat `key=value` serialization, one entry per line. Values use the
    /// shortest round-trip float formatting, so identical reports are
    /// byte-identical.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("frames={}\n", self.frames));
        out.push_str(&format!("macc_pix={}\n", self.macc_pix));
        out.push_str(&format!("macc_inst={}\n", self.macc_inst));
        out.push_str(&format!("miou={}\n", self.miou));
        for (instance, value) in &self.per_instance_iou {
            out.push_str(&format!("iou_instance_{instance}={value}\n"));
        }
        for fm in &self.per_frame {
            out.push_str(&format!("frame_{}_macc_pix={}\n", fm.frame, fm.macc_pix));
            if let Some(v) = fm.macc_inst {
                out.push_str(&format!("frame_{}_macc_inst={v}\n", fm.frame));
            }
            if let Some(v) = fm.miou {
                out.push_str(&format!("frame_{}_miou={v}\n", fm.frame));
            }
        }
        out
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "frames evaluated: {}", self.frames)?;
        writeln!(f, "  mAcc-pix  {:.4}", self.macc_pix)?;
        writeln!(f, "  mAcc-inst {:.4}", self.macc_inst)?;
        writeln!(f, "  mIoU      {:.4}", self.miou)?;
        if !self.per_instance_iou.is_empty() {
            writeln!(f, "per-instance IoU:")?;
            for (instance, value) in &self.per_instance_iou {
                writeln!(f, "  instance {instance}: {value:.4}")?;
            }
        }
        Ok(())
    }
}

/// Renders every frame of `split` and scores the panoptic maps against the
/// stored masks.
pub fn evaluate(
    set: &GaussianSet,
    field: &DeformationField,
    scene: &SceneDataset,
    split: Split,
) -> Result<MetricReport> {
    let indices = scene.frames_in(split);
    if indices.is_empty() {
        return Err(Error::Usage(format!("split {split:?} contains no frames")));
    }
    let predictions: Vec<(usize, Vec<u16>)> = indices
        .par_iter()
        .map(|&idx| {
            let frame = &scene.frames[idx];
            let camera = &scene.cameras[frame.camera];
            let buffers = render(
                set,
                field,
                camera,
                frame.time,
                RenderOptions { contributions: false, cache: false },
            )?;
            Ok((idx, panoptic_map(&buffers)))
        })
        .collect::<Result<_>>()?;
    report_from_maps(&predictions, scene)
}

/// Builds the report from already-extracted label maps, `(frame index, map)`.
pub fn report_from_maps(
    predictions: &[(usize, Vec<u16>)],
    scene: &SceneDataset,
) -> Result<MetricReport> {
    let mut per_frame = Vec::with_capacity(predictions.len());
    let mut iou_sums: BTreeMap<u16, (f64, usize)> = BTreeMap::new();
    let mut pix_sum = 0.0;
    let mut inst_sum = 0.0;
    let mut iou_sum = 0.0;
    let mut contributing = 0usize;

    for (idx, pred) in predictions {
        let gt = &scene.frames[*idx].labels;
        if pred.len() != gt.len() {
            return Err(Error::ShapeMismatch(format!(
                "frame {idx}: {} predicted pixels vs {} mask pixels",
                pred.len(),
                gt.len()
            )));
        }
        let pix = frame_macc_pix(pred, gt);
        pix_sum += pix;
        let present = present_instances(gt);
        let (frame_inst, frame_iou) = if present.is_empty() {
            (None, None)
        } else {
            let mut acc = 0.0;
            let mut iou = 0.0;
            for &k in &present {
                acc += frame_instance_accuracy(pred, gt, k);
                let v = frame_instance_iou(pred, gt, k);
                iou += v;
                let entry = iou_sums.entry(k).or_insert((0.0, 0));
                entry.0 += v;
                entry.1 += 1;
            }
            acc /= present.len() as f64;
            iou /= present.len() as f64;
            inst_sum += acc;
            iou_sum += iou;
            contributing += 1;
            (Some(acc), Some(iou))
        };
        per_frame.push(FrameMetrics { frame: *idx, macc_pix: pix, macc_inst: frame_inst, miou: frame_iou });
    }

    if contributing == 0 {
        return Err(Error::Usage("no evaluated frame contains an instance".into()));
    }
    Ok(MetricReport {
        macc_pix: pix_sum / predictions.len() as f64,
        macc_inst: inst_sum / contributing as f64,
        miou: iou_sum / contributing as f64,
        per_instance_iou: iou_sums
            .into_iter()
            .map(|(k, (sum, count))| (k, sum / count as f64))
            .collect(),
        per_frame,
        frames: predictions.len(),
    })
}
