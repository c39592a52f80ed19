use std::sync::Arc;

use ndarray::{Array3, Array4};

use super::{preprocess_frame, timing_targets, Demonstration, Domain, TaskDataset};
use crate::error::{Result, SclError};

/// A demonstration with frames preprocessed to model input.
#[derive(Debug, Clone)]
pub struct PreparedDemo {
    pub demo_id: String,
    /// Channel-first `[3, S, S]` images in `[0, 1]`.
    pub images: Vec<Arc<Array3<f32>>>,
    pub labels: Vec<u8>,
    pub timing: Vec<f64>,
    pub success_onset: usize,
    pub domain: Domain,
}

impl PreparedDemo {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

pub fn prepare_demo(demo: &Demonstration, size: usize) -> Result<PreparedDemo> {
    demo.validate()?;
    let images = demo
        .frames
        .iter()
        .map(|f| preprocess_frame(f, size).map(Arc::new))
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedDemo {
        demo_id: demo.demo_id.clone(),
        images,
        labels: demo.labels.clone(),
        timing: timing_targets(demo)?,
        success_onset: demo.success_onset,
        domain: demo.domain,
    })
}

/// A task with every frame preprocessed once.
#[derive(Debug, Clone)]
pub struct PreparedTask {
    pub task_id: String,
    pub input_size: usize,
    pub train: Vec<PreparedDemo>,
    pub test: Vec<PreparedDemo>,
}

pub fn prepare_task(dataset: &TaskDataset, size: usize) -> Result<PreparedTask> {
    dataset.validate()?;
    let prep = |demos: &[Demonstration]| demos.iter().map(|d| prepare_demo(d, size)).collect::<Result<Vec<_>>>();
    Ok(PreparedTask {
        task_id: dataset.task_id.clone(),
        input_size: size,
        train: prep(&dataset.train_demos)?,
        test: prep(&dataset.test_demos)?,
    })
}

impl PreparedTask {
    /// `(demo, step)` for every training frame, in demo order.
    pub fn train_frame_refs(&self) -> Vec<(usize, usize)> {
        self.train
            .iter()
            .enumerate()
            .flat_map(|(d, demo)| (0..demo.len()).map(move |s| (d, s)))
            .collect()
    }

    /// Target-domain frames with success labels removed.
    pub fn target_unlabeled(&self) -> UnlabeledFrames {
        UnlabeledFrames::from_demos(&self.test)
    }

    pub fn train_subset(&self, indices: &[usize]) -> Self {
        Self {
            task_id: self.task_id.clone(),
            input_size: self.input_size,
            train: indices.iter().map(|&i| self.train[i].clone()).collect(),
            test: self.test.clone(),
        }
    }

    pub fn num_train_frames(&self) -> usize {
        self.train.iter().map(PreparedDemo::len).sum()
    }
}

/// Frames without success labels, for unsupervised adaptation.
///
/// Only the position of each frame within its recording is kept
/// (`timing`, the completion proportion `t / (j - 1)`), which is known
/// without any annotation.
#[derive(Debug, Clone, Default)]
pub struct UnlabeledFrames {
    pub images: Vec<Arc<Array3<f32>>>,
    pub timing: Vec<f64>,
}

impl UnlabeledFrames {
    pub fn from_demos(demos: &[PreparedDemo]) -> Self {
        let mut out = Self::default();
        for d in demos {
            out.images.extend(d.images.iter().cloned());
            out.timing.extend(d.timing.iter().copied());
        }
        out
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Stacks channel-first images into a `[B, 3, S, S]` batch.
pub fn frame_batch(images: &[&Array3<f32>]) -> Result<Array4<f64>> {
    let first = images
        .first()
        .ok_or_else(|| SclError::InsufficientData("empty batch".into()))?;
    let (c, h, w) = first.dim();
    let mut out = Array4::<f64>::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        if img.dim() != (c, h, w) {
            return Err(SclError::Shape {
                expected: format!("{c}x{h}x{w}"),
                got: format!("{:?}", img.dim()),
            });
        }
        out.index_axis_mut(ndarray::Axis(0), i)
            .zip_mut_with(img, |o, &v| *o = f64::from(v));
    }
    Ok(out)
}
