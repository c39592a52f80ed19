use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{labels_from_onset, Demonstration, Domain, Frame, TaskDataset};
use crate::error::{Result, SclError};

pub const MANIFEST_FILE: &str = "dataset.json";
pub const DEFAULT_FRAME_PATTERN: &str = "frame_%05d.png";

/// Root document of a task directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub task_id: String,
    pub sampling_rate_hz: f64,
    pub splits: ManifestSplits,
    /// Free-form task description; carried into [`TaskDataset::metadata`].
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSplits {
    pub train: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub demo_id: String,
    /// Directory of the frames, relative to the task root.
    pub frame_dir: String,
    /// printf-style file name with one integer field, e.g. `frame_%05d.png`.
    pub frame_pattern: String,
    pub num_frames: usize,
    pub success_onset: usize,
    pub domain: Domain,
}

/// Expands the single `%d` / `%0Nd` field of a frame pattern.
pub(crate) fn format_frame_name(pattern: &str, index: usize) -> Result<String> {
    let start = pattern
        .find('%')
        .ok_or_else(|| SclError::Format(format!("frame pattern `{pattern}` has no % field")))?;
    let rest = &pattern[start + 1..];
    let d_pos = rest
        .find('d')
        .ok_or_else(|| SclError::Format(format!("frame pattern `{pattern}` lacks a `d` conversion")))?;
    let spec = &rest[..d_pos];
    let (zero, width) = match spec.strip_prefix('0') {
        Some(w) => (true, w),
        None => (false, spec),
    };
    let width: usize = if width.is_empty() {
        0
    } else {
        width
            .parse()
            .map_err(|_| SclError::Format(format!("bad width in frame pattern `{pattern}`")))?
    };
    let number = if zero {
        format!("{index:0width$}")
    } else {
        format!("{index:width$}")
    };
    Ok(format!("{}{}{}", &pattern[..start], number, &rest[d_pos + 1..]))
}

fn read_png(path: &Path) -> Result<Array3<u8>> {
    let img = image::open(path).map_err(|e| SclError::ingestion(path, format!("cannot decode PNG: {e}")))?;
    let img = match img {
        image::DynamicImage::ImageRgb8(rgb) => rgb,
        other => {
            return Err(SclError::ingestion(
                path,
                format!("expected 8-bit RGB, found {:?}", other.color()),
            ))
        }
    };
    let (w, h) = img.dimensions();
    Array3::from_shape_vec((h as usize, w as usize, 3), img.into_raw())
        .map_err(|e| SclError::ingestion(path, e.to_string()))
}

pub(crate) fn write_png(path: &Path, pixels: &Array3<u8>) -> Result<()> {
    let (h, w, _) = pixels.dim();
    let data = pixels.as_standard_layout().iter().copied().collect::<Vec<_>>();
    let img = image::RgbImage::from_raw(w as u32, h as u32, data)
        .ok_or_else(|| SclError::Format("pixel buffer size mismatch".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| SclError::ingestion(path, format!("cannot write PNG: {e}")))
}

fn load_entry(root: &Path, task_id: &str, entry: &ManifestEntry, expected: Domain) -> Result<Demonstration> {
    let dir = root.join(&entry.frame_dir);
    if entry.domain != expected {
        return Err(SclError::ingestion(
            &dir,
            format!("demo `{}` is tagged {:?} but listed under the {:?} split", entry.demo_id, entry.domain, expected),
        ));
    }
    if entry.num_frames < 2 {
        return Err(SclError::ingestion(&dir, format!("demo `{}` declares {} frames; need at least 2", entry.demo_id, entry.num_frames)));
    }
    if entry.success_onset > entry.num_frames {
        return Err(SclError::ingestion(
            &dir,
            format!("demo `{}` success onset {} exceeds {} frames", entry.demo_id, entry.success_onset, entry.num_frames),
        ));
    }
    if !dir.is_dir() {
        return Err(SclError::ingestion(&dir, format!("frame directory for demo `{}` not found", entry.demo_id)));
    }
    let mut frames = Vec::with_capacity(entry.num_frames);
    let mut size = None;
    for i in 0..entry.num_frames {
        let path = dir.join(format_frame_name(&entry.frame_pattern, i)?);
        if !path.is_file() {
            return Err(SclError::ingestion(&path, format!("missing frame {i} of demo `{}`", entry.demo_id)));
        }
        let pixels = read_png(&path)?;
        let dims = (pixels.shape()[0], pixels.shape()[1]);
        match size {
            None => size = Some(dims),
            Some(s) if s != dims => {
                return Err(SclError::ingestion(&path, format!("frame size {dims:?} differs from {s:?} earlier in the demo")))
            }
            _ => {}
        }
        frames.push(Frame::new(pixels, i));
    }
    let extra = dir.join(format_frame_name(&entry.frame_pattern, entry.num_frames)?);
    if extra.exists() {
        return Err(SclError::ingestion(
            &extra,
            format!("demo `{}` has more frames on disk than the declared {}", entry.demo_id, entry.num_frames),
        ));
    }
    let demo = Demonstration {
        demo_id: entry.demo_id.clone(),
        task_id: task_id.to_string(),
        labels: labels_from_onset(frames.len(), entry.success_onset),
        frames,
        success_onset: entry.success_onset,
        domain: entry.domain,
    };
    demo.validate()?;
    Ok(demo)
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Reads and validates a task directory (or its `dataset.json`).
pub fn load_manifest(path: impl AsRef<Path>) -> Result<TaskDataset> {
    let file = manifest_path(path.as_ref());
    if !file.is_file() {
        return Err(SclError::ingestion(&file, "no dataset manifest found"));
    }
    let root = file.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text = fs::read_to_string(&file).map_err(|e| SclError::io(&file, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| SclError::ingestion(&file, format!("malformed manifest: {e}")))?;
    if manifest.splits.train.is_empty() {
        return Err(SclError::ingestion(&file, "manifest lists no training demonstrations"));
    }
    let mut metadata = manifest.metadata.clone();
    metadata.insert("sampling_rate_hz".into(), serde_json::json!(manifest.sampling_rate_hz));
    let load = |entries: &[ManifestEntry], domain| -> Result<Vec<Demonstration>> {
        entries
            .iter()
            .map(|e| load_entry(&root, &manifest.task_id, e, domain))
            .collect()
    };
    let dataset = TaskDataset {
        task_id: manifest.task_id.clone(),
        train_demos: load(&manifest.splits.train, Domain::Source)?,
        test_demos: load(&manifest.splits.test, Domain::Target)?,
        metadata,
    };
    dataset
        .validate()
        .map_err(|e| SclError::ingestion(&file, e.to_string()))?;
    Ok(dataset)
}

/// Writes frames as PNG under `root/frames/<demo_id>/` plus `dataset.json`.
pub fn write_dataset(dataset: &TaskDataset, root: impl AsRef<Path>, sampling_rate_hz: f64) -> Result<Manifest> {
    let root = root.as_ref();
    dataset.validate()?;
    let mut splits = ManifestSplits {
        train: Vec::new(),
        test: Vec::new(),
    };
    for (demos, out) in [(&dataset.train_demos, &mut splits.train), (&dataset.test_demos, &mut splits.test)] {
        for d in demos {
            let rel = format!("frames/{}", d.demo_id);
            let dir = root.join(&rel);
            fs::create_dir_all(&dir).map_err(|e| SclError::io(&dir, e))?;
            for (i, f) in d.frames.iter().enumerate() {
                write_png(&dir.join(format_frame_name(DEFAULT_FRAME_PATTERN, i)?), &f.pixels)?;
            }
            out.push(ManifestEntry {
                demo_id: d.demo_id.clone(),
                frame_dir: rel,
                frame_pattern: DEFAULT_FRAME_PATTERN.into(),
                num_frames: d.len(),
                success_onset: d.success_onset,
                domain: d.domain,
            });
        }
    }
    let mut metadata = dataset.metadata.clone();
    metadata.remove("sampling_rate_hz");
    let manifest = Manifest {
        task_id: dataset.task_id.clone(),
        sampling_rate_hz,
        splits,
        metadata,
    };
    let file = root.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&file, text).map_err(|e| SclError::io(&file, e))?;
    Ok(manifest)
}
