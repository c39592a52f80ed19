//! Demonstration data: labels, timing targets, preprocessing, splits,
//! sequence windows and on-disk ingestion.

mod convert;
mod manifest;
mod prepare;

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use convert::{convert_kitchen, convert_mime};
pub use manifest::{load_manifest, write_dataset, Manifest, ManifestEntry, ManifestSplits, MANIFEST_FILE};
pub use prepare::{
    frame_batch, prepare_demo, prepare_task, PreparedDemo, PreparedTask, UnlabeledFrames,
};

use crate::error::{Result, SclError};
use crate::rng::component_rng;
use crate::synthgen::SceneMeta;

/// Side length of the square model input.
pub const MODEL_INPUT_SIZE: usize = 160;

/// Number of frames in a sequence-model window.
pub const WINDOW_LEN: usize = 10;

/// Which side of the adaptation problem a demonstration belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    /// Conditions seen during demonstrations.
    Source,
    /// Unseen test conditions.
    Target,
}

impl Domain {
    /// Numeric domain tag: 0 for source, 1 for target.
    pub fn tag(self) -> u8 {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }
}

/// One camera image of a demonstration, `height x width x 3` RGB.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub pixels: Array3<u8>,
    pub step_index: usize,
    /// Scene geometry, present for generated frames only.
    pub scene: Option<SceneMeta>,
}

impl Frame {
    pub fn new(pixels: Array3<u8>, step_index: usize) -> Self {
        Self {
            pixels,
            step_index,
            scene: None,
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }
}

/// A labeled frame sequence for one execution of a task.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub demo_id: String,
    pub task_id: String,
    pub frames: Vec<Frame>,
    pub labels: Vec<u8>,
    /// Index of the first Success frame, or `len()` if none was observed.
    pub success_onset: usize,
    pub domain: Domain,
}

impl Demonstration {
    /// Number of time steps `j`.
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn with_task(mut self, task_id: impl Into<String>) -> Self {
        self.task_id = task_id.into();
        self
    }

    pub fn with_domain(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }

    pub fn count_success(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    /// Checks length, label monotonicity, onset consistency and step indices.
    pub fn validate(&self) -> Result<()> {
        let degenerate = |reason: String| SclError::DegenerateDemo {
            demo: self.demo_id.clone(),
            reason,
        };
        let j = self.frames.len();
        if j < 2 {
            return Err(degenerate(format!("needs at least 2 frames, has {j}")));
        }
        if self.labels.len() != j {
            return Err(degenerate(format!("{} labels for {j} frames", self.labels.len())));
        }
        if self.success_onset > j {
            return Err(degenerate(format!("success onset {} beyond length {j}", self.success_onset)));
        }
        for (i, (&label, frame)) in self.labels.iter().zip(&self.frames).enumerate() {
            let expected = u8::from(i >= self.success_onset);
            if label != expected {
                return Err(degenerate(format!("label {label} at step {i} contradicts onset {}", self.success_onset)));
            }
            if frame.step_index != i {
                return Err(degenerate(format!("frame at position {i} has step index {}", frame.step_index)));
            }
        }
        Ok(())
    }
}

/// Assigns labels from a success onset: 0 before it, 1 from it onward.
///
/// Step indices of the frames are renumbered `0..j`.
pub fn label_frames(demo_id: &str, mut frames: Vec<Frame>, success_onset: usize) -> Result<Demonstration> {
    let j = frames.len();
    if j < 2 {
        return Err(SclError::DegenerateDemo {
            demo: demo_id.to_string(),
            reason: format!("needs at least 2 frames, has {j}"),
        });
    }
    if success_onset > j {
        return Err(SclError::Validation(format!(
            "demonstration `{demo_id}`: success onset {success_onset} outside 0..={j}"
        )));
    }
    for (i, f) in frames.iter_mut().enumerate() {
        f.step_index = i;
    }
    Ok(Demonstration {
        demo_id: demo_id.to_string(),
        task_id: String::new(),
        frames,
        labels: labels_from_onset(j, success_onset),
        success_onset,
        domain: Domain::Source,
    })
}

pub(crate) fn labels_from_onset(j: usize, onset: usize) -> Vec<u8> {
    (0..j).map(|i| u8::from(i >= onset)).collect()
}

/// Task-completion proportion `t / (j - 1)` for every step of a demonstration.
pub fn timing_targets(demo: &Demonstration) -> Result<Vec<f64>> {
    timing_targets_for_len(demo.len()).map_err(|_| SclError::DegenerateDemo {
        demo: demo.demo_id.clone(),
        reason: format!("timing targets need j >= 2, got {}", demo.len()),
    })
}

/// Same as [`timing_targets`] for a bare length.
pub fn timing_targets_for_len(j: usize) -> Result<Vec<f64>> {
    if j < 2 {
        return Err(SclError::DegenerateDemo {
            demo: "<unnamed>".into(),
            reason: format!("timing targets need j >= 2, got {j}"),
        });
    }
    let denom = (j - 1) as f64;
    Ok((0..j).map(|t| t as f64 / denom).collect())
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + t * (b - a)
}

/// Bilinear resampling of a channel-first float image to `size x size`,
/// using pixel-center alignment. A same-size input is copied unchanged.
fn resize_chw(src: &Array3<f32>, size: usize) -> Array3<f32> {
    let (c, h, w) = src.dim();
    if h == size && w == size {
        return src.clone();
    }
    let sy = h as f32 / size as f32;
    let sx = w as f32 / size as f32;
    let coords = |dst: usize, scale: f32, len: usize| {
        let pos = ((dst as f32 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f32);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, pos - lo as f32)
    };
    let ys: Vec<_> = (0..size).map(|y| coords(y, sy, h)).collect();
    let xs: Vec<_> = (0..size).map(|x| coords(x, sx, w)).collect();
    let mut out = Array3::<f32>::zeros((c, size, size));
    for ch in 0..c {
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = lerp(src[[ch, y0, x0]], src[[ch, y0, x1]], fx);
                let bottom = lerp(src[[ch, y1, x0]], src[[ch, y1, x1]], fx);
                out[[ch, oy, ox]] = lerp(top, bottom, fy);
            }
        }
    }
    out
}

/// Resizes a raw `H x W x 3` image to `size x size` (bilinear, aspect ratio
/// not preserved) and scales channels to `[0, 1]`. Output is channel-first
/// `[3, size, size]`.
pub fn preprocess_pixels(raw: &Array3<u8>, size: usize) -> Result<Array3<f32>> {
    let (h, w, c) = raw.dim();
    if c != 3 {
        return Err(SclError::Format(format!("expected 3 color channels, got {c}")));
    }
    if h == 0 || w == 0 {
        return Err(SclError::Format(format!("empty image {h}x{w}")));
    }
    if size == 0 {
        return Err(SclError::Config("model input size must be positive".into()));
    }
    let chw = raw.view().permuted_axes([2, 0, 1]).mapv(f32::from);
    Ok(resize_chw(&chw, size).mapv(|v| v / 255.0))
}

/// [`preprocess_pixels`] for a frame.
pub fn preprocess_frame(raw: &Frame, size: usize) -> Result<Array3<f32>> {
    preprocess_pixels(&raw.pixels, size)
}

/// Brings an already preprocessed image to `size`; values are not rescaled.
/// Applied to the output of [`preprocess_frame`] at the same size this is
/// the identity.
pub fn renormalize(prepared: &Array3<f32>, size: usize) -> Result<Array3<f32>> {
    if prepared.shape()[0] != 3 {
        return Err(SclError::Format(format!(
            "expected 3 color channels, got {}",
            prepared.shape()[0]
        )));
    }
    Ok(resize_chw(prepared, size))
}

/// Seeded partition of `0..n` into train and validation index sets with
/// `round(ratio * n)` training items. Both sets are returned sorted.
pub fn split_indices(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(SclError::InsufficientData(format!("need at least 2 items to split, got {n}")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(SclError::Validation(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let n_train = (ratio * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut component_rng(seed, "split"));
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Random train/validation split of arbitrary items; see [`split_indices`].
pub fn split_train_val<T: Clone>(items: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    let (tr, va) = split_indices(items.len(), ratio, seed)?;
    Ok((
        tr.into_iter().map(|i| items[i].clone()).collect(),
        va.into_iter().map(|i| items[i].clone()).collect(),
    ))
}

/// One sequence sample: the window ending at frame `end`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    /// Index of the last (most recent) frame.
    pub end: usize,
    /// Frame index for each window position, oldest first.
    pub frame_indices: Vec<usize>,
    pub labels: Vec<u8>,
    /// True where the position is left padding.
    pub pad_mask: Vec<bool>,
}

/// Sliding windows of length `window`, one ending at every frame. Windows
/// that would start before the first frame are left-padded with frame 0.
pub fn make_windows(labels: &[u8], window: usize) -> Result<Vec<Window>> {
    if window == 0 {
        return Err(SclError::Validation("window length must be at least 1".into()));
    }
    Ok((0..labels.len())
        .map(|end| {
            let mut frame_indices = Vec::with_capacity(window);
            let mut pad_mask = Vec::with_capacity(window);
            for pos in 0..window {
                let offset = window - 1 - pos;
                if offset > end {
                    frame_indices.push(0);
                    pad_mask.push(true);
                } else {
                    frame_indices.push(end - offset);
                    pad_mask.push(false);
                }
            }
            let labels = frame_indices.iter().map(|&i| labels[i]).collect();
            Window {
                end,
                frame_indices,
                labels,
                pad_mask,
            }
        })
        .collect())
}

/// [`make_windows`] over a demonstration's labels.
pub fn demo_windows(demo: &Demonstration, window: usize) -> Result<Vec<Window>> {
    make_windows(&demo.labels, window)
}

/// A named task with source-domain training and target-domain test demos.
#[derive(Debug, Clone)]
pub struct TaskDataset {
    pub task_id: String,
    pub train_demos: Vec<Demonstration>,
    pub test_demos: Vec<Demonstration>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

/// Frame counts per split and class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train_non_success: usize,
    pub train_success: usize,
    pub test_non_success: usize,
    pub test_success: usize,
}

impl TaskDataset {
    pub fn validate(&self) -> Result<()> {
        if self.train_demos.is_empty() {
            return Err(SclError::InsufficientData(format!("task `{}` has no training demonstrations", self.task_id)));
        }
        let mut ids = BTreeSet::new();
        for (demos, domain) in [(&self.train_demos, Domain::Source), (&self.test_demos, Domain::Target)] {
            for d in demos {
                d.validate()?;
                if d.task_id != self.task_id {
                    return Err(SclError::Validation(format!(
                        "demonstration `{}` belongs to task `{}`, not `{}`",
                        d.demo_id, d.task_id, self.task_id
                    )));
                }
                if d.domain != domain {
                    return Err(SclError::Validation(format!(
                        "demonstration `{}` has domain {:?} but sits in the {:?} split",
                        d.demo_id, d.domain, domain
                    )));
                }
                if !ids.insert(d.demo_id.as_str()) {
                    return Err(SclError::Validation(format!("duplicate demonstration id `{}`", d.demo_id)));
                }
            }
        }
        Ok(())
    }

    pub fn counts(&self) -> SplitCounts {
        let tally = |demos: &[Demonstration]| {
            demos.iter().fold((0, 0), |(ns, s), d| {
                let succ = d.count_success();
                (ns + d.len() - succ, s + succ)
            })
        };
        let (train_non_success, train_success) = tally(&self.train_demos);
        let (test_non_success, test_success) = tally(&self.test_demos);
        SplitCounts {
            train_non_success,
            train_success,
            test_non_success,
            test_success,
        }
    }

    /// Copy restricted to the first `k` training demonstrations.
    pub fn with_train_subset(&self, indices: &[usize]) -> Self {
        Self {
            task_id: self.task_id.clone(),
            train_demos: indices.iter().map(|&i| self.train_demos[i].clone()).collect(),
            test_demos: self.test_demos.clone(),
            metadata: self.metadata.clone(),
        }
    }
}

/// A training batch of preprocessed frames.
#[derive(Debug, Clone)]
pub struct FrameBatch {
    /// `[B, 3, S, S]`, values in `[0, 1]`.
    pub images: Array4<f64>,
    pub labels: Vec<u8>,
    pub timing_targets: Vec<f64>,
    pub domain_tags: Vec<u8>,
}

impl FrameBatch {
    pub fn new(images: Array4<f64>, labels: Vec<u8>, timing_targets: Vec<f64>, domain_tags: Vec<u8>) -> Result<Self> {
        let n = images.shape()[0];
        if labels.len() != n || timing_targets.len() != n || domain_tags.len() != n {
            return Err(SclError::Shape {
                expected: format!("{n} labels, timing targets and domain tags"),
                got: format!("{}/{}/{}", labels.len(), timing_targets.len(), domain_tags.len()),
            });
        }
        if timing_targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(SclError::Validation("timing targets must lie in [0, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            timing_targets,
            domain_tags,
        })
    }

    /// Batch with only images; labels, timing and domain default to zero.
    pub fn from_images(images: Array4<f64>) -> Self {
        let n = images.shape()[0];
        Self {
            images,
            labels: vec![0; n],
            timing_targets: vec![0.0; n],
            domain_tags: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}
