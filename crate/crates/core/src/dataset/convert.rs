//! Converters from the two raw collection layouts into a manifest directory.
//!
//! Kitchen-style flat layout:
//!
//! ```text
//! <src>/onsets.csv            split,demo_id,success_onset
//! <src>/train/<demo>_<n>.png  frames of every training demo in one folder
//! <src>/test/<demo>_<n>.png
//! ```
//!
//! MIME-style per-demo layout:
//!
//! ```text
//! <src>/{train,test}/<demo>/*.png              frames in lexicographic order
//! <src>/{train,test}/<demo>/success_onset.txt  single integer
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::manifest::{format_frame_name, DEFAULT_FRAME_PATTERN};
use super::{Domain, Manifest, ManifestEntry, ManifestSplits, MANIFEST_FILE};
use crate::error::{Result, SclError};

const SPLITS: [(&str, Domain); 2] = [("train", Domain::Source), ("test", Domain::Target)];

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| SclError::io(dir, e))? {
        let path = entry.map_err(|e| SclError::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn copy_frames(frames: &[PathBuf], out_root: &Path, demo_id: &str) -> Result<String> {
    let rel = format!("frames/{demo_id}");
    let dir = out_root.join(&rel);
    fs::create_dir_all(&dir).map_err(|e| SclError::io(&dir, e))?;
    for (i, src) in frames.iter().enumerate() {
        let dst = dir.join(format_frame_name(DEFAULT_FRAME_PATTERN, i)?);
        fs::copy(src, &dst).map_err(|e| SclError::io(src, e))?;
    }
    Ok(rel)
}

fn write_manifest(out_root: &Path, manifest: &Manifest) -> Result<()> {
    let file = out_root.join(MANIFEST_FILE);
    fs::write(&file, serde_json::to_string_pretty(manifest)?).map_err(|e| SclError::io(&file, e))
}

fn entry(demo_id: &str, frame_dir: String, num_frames: usize, success_onset: usize, domain: Domain, path: &Path) -> Result<ManifestEntry> {
    if success_onset > num_frames {
        return Err(SclError::ingestion(
            path,
            format!("demo `{demo_id}`: success onset {success_onset} beyond {num_frames} frames"),
        ));
    }
    Ok(ManifestEntry {
        demo_id: demo_id.to_string(),
        frame_dir,
        frame_pattern: DEFAULT_FRAME_PATTERN.into(),
        num_frames,
        success_onset,
        domain,
    })
}

/// Converts a Kitchen-style flat layout; returns the written manifest.
pub fn convert_kitchen(src: &Path, out_root: &Path, task_id: &str, sampling_rate_hz: f64) -> Result<Manifest> {
    let csv_path = src.join("onsets.csv");
    let text = fs::read_to_string(&csv_path).map_err(|e| SclError::io(&csv_path, e))?;
    let mut onsets: BTreeMap<(String, String), usize> = BTreeMap::new();
    for (line_no, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [split, demo, onset] = fields[..] else {
            return Err(SclError::ingestion(&csv_path, format!("line {}: expected 3 fields", line_no + 1)));
        };
        let onset = onset
            .parse()
            .map_err(|_| SclError::ingestion(&csv_path, format!("line {}: bad onset `{onset}`", line_no + 1)))?;
        onsets.insert((split.to_string(), demo.to_string()), onset);
    }

    let mut splits = ManifestSplits {
        train: Vec::new(),
        test: Vec::new(),
    };
    for (split, domain) in SPLITS {
        let dir = src.join(split);
        if !dir.is_dir() {
            continue;
        }
        let mut by_demo: BTreeMap<String, Vec<(usize, PathBuf)>> = BTreeMap::new();
        for path in list_pngs(&dir)? {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let (demo, idx) = stem
                .rsplit_once('_')
                .and_then(|(d, n)| n.parse::<usize>().ok().map(|n| (d.to_string(), n)))
                .ok_or_else(|| SclError::ingestion(&path, "expected <demo>_<index>.png"))?;
            by_demo.entry(demo).or_default().push((idx, path));
        }
        for (demo, mut frames) in by_demo {
            frames.sort();
            let onset = *onsets
                .get(&(split.to_string(), demo.clone()))
                .ok_or_else(|| SclError::ingestion(&csv_path, format!("no onset for {split} demo `{demo}`")))?;
            let paths: Vec<PathBuf> = frames.into_iter().map(|(_, p)| p).collect();
            let rel = copy_frames(&paths, out_root, &demo)?;
            let e = entry(&demo, rel, paths.len(), onset, domain, &dir)?;
            match domain {
                Domain::Source => splits.train.push(e),
                Domain::Target => splits.test.push(e),
            }
        }
    }
    if splits.train.is_empty() {
        return Err(SclError::ingestion(src, "no training frames found"));
    }
    let manifest = Manifest {
        task_id: task_id.to_string(),
        sampling_rate_hz,
        splits,
        metadata: BTreeMap::from([("layout".to_string(), serde_json::json!("kitchen"))]),
    };
    write_manifest(out_root, &manifest)?;
    Ok(manifest)
}

/// Converts a MIME-style per-demo layout; returns the written manifest.
pub fn convert_mime(src: &Path, out_root: &Path, task_id: &str, sampling_rate_hz: f64) -> Result<Manifest> {
    let mut splits = ManifestSplits {
        train: Vec::new(),
        test: Vec::new(),
    };
    for (split, domain) in SPLITS {
        let dir = src.join(split);
        if !dir.is_dir() {
            continue;
        }
        let mut demos: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| SclError::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        demos.sort();
        for demo_dir in demos {
            let demo = demo_dir.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let onset_file = demo_dir.join("success_onset.txt");
            let onset: usize = fs::read_to_string(&onset_file)
                .map_err(|e| SclError::io(&onset_file, e))?
                .trim()
                .parse()
                .map_err(|_| SclError::ingestion(&onset_file, "success onset is not an integer"))?;
            let frames = list_pngs(&demo_dir)?;
            let rel = copy_frames(&frames, out_root, &demo)?;
            let e = entry(&demo, rel, frames.len(), onset, domain, &demo_dir)?;
            match domain {
                Domain::Source => splits.train.push(e),
                Domain::Target => splits.test.push(e),
            }
        }
    }
    if splits.train.is_empty() {
        return Err(SclError::ingestion(src, "no training demonstrations found"));
    }
    let manifest = Manifest {
        task_id: task_id.to_string(),
        sampling_rate_hz,
        splits,
        metadata: BTreeMap::from([("layout".to_string(), serde_json::json!("mime"))]),
    };
    write_manifest(out_root, &manifest)?;
    Ok(manifest)
}
