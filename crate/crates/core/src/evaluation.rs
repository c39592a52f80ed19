//! Classification metrics, per-task and macro reports, per-image timing,
//! probability traces, the demo-count ablation, and simple line plots.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use scl_autograd::Tape;
use serde::{Deserialize, Serialize};

use crate::dataset::{frame_batch, PreparedDemo, PreparedTask};
use crate::error::{Result, SclError};
use crate::models::{build_model, ArchId, ModelConfig, ModelHandle};
use crate::rng::component_rng;
use crate::training::{train, TrainConfig};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Timing measurements take this lock so they never overlap each other.
static TIMING_LOCK: Mutex<()> = Mutex::new(());

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "FN")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

fn check_lengths(n_probs: usize, n_labels: usize) -> Result<()> {
    if n_probs != n_labels {
        return Err(SclError::Shape {
            expected: format!("{n_labels} probabilities"),
            got: n_probs.to_string(),
        });
    }
    if n_probs == 0 {
        return Err(SclError::InsufficientData("no frames to evaluate".into()));
    }
    Ok(())
}

/// Counts with `prob >= threshold` predicting Success.
pub fn confusion(probs: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionCounts> {
    check_lengths(probs.len(), labels.len())?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(SclError::Validation(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &y) in probs.iter().zip(labels) {
        match (p >= threshold, y == 1) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasicMetrics {
    pub acc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tpr: f64,
    pub tnr: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Rates from counts; every 0/0 ratio is taken as 0.
pub fn basic_metrics(c: ConfusionCounts) -> BasicMetrics {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    BasicMetrics {
        acc: ratio(c.tp + c.tn, c.total()),
        precision,
        recall,
        f1,
        tpr: recall,
        tnr: ratio(c.tn, c.tn + c.fp),
    }
}

/// Rank-based AUC: the fraction of (positive, negative) pairs ordered
/// correctly, with ties counting one half.
pub fn auc(probs: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(probs.len(), labels.len())?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(SclError::UndefinedMetric("AUC needs at least one positive and one negative frame".into()));
    }
    if probs.iter().any(|p| p.is_nan()) {
        return Err(SclError::UndefinedMetric("AUC of NaN scores".into()));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]));
    // sum of midranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && probs[order[j + 1]] == probs[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(SclError::Shape {
            expected: "two equal-length series of at least 2 values".into(),
            got: format!("{} and {}", x.len(), y.len()),
        });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(SclError::UndefinedMetric("correlation with a zero-variance series".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimingMode {
    /// Forward and backward pass of the frame classifier loss.
    Train,
    /// Inference as used by evaluation.
    Test,
}

pub const MIN_TIMING_FRAMES: usize = 100;

/// Mean wall-clock seconds per image over `reps` (at least 3) timed
/// passes after one untimed warm-up pass.
pub fn time_per_image(model: &ModelHandle, demos: &[PreparedDemo], mode: TimingMode, reps: usize) -> Result<f64> {
    let frames: usize = demos.iter().map(PreparedDemo::len).sum();
    if frames == 0 {
        return Err(SclError::InsufficientData("no frames to time".into()));
    }
    if frames < MIN_TIMING_FRAMES {
        log::warn!("timing over only {frames} frames; averages may be unstable");
    }
    let _guard = TIMING_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let pass = || -> Result<()> {
        match mode {
            TimingMode::Test => {
                for d in demos {
                    model.predict_demo(d)?;
                }
            }
            TimingMode::Train => {
                for d in demos {
                    let imgs: Vec<_> = d.images.iter().map(|a| a.as_ref()).collect();
                    for chunk in imgs.chunks(16) {
                        let mut tape = Tape::new();
                        let x = tape.constant(frame_batch(chunk)?.into_dyn());
                        let f = model.encode(&mut tape, x, false)?;
                        let z = if model.cls.is_some() {
                            model.cls_logits(&mut tape, f)?
                        } else {
                            model.frame_head_logits(&mut tape, f)?
                        };
                        let loss = tape.bce_with_logits(z, ndarray::ArrayD::zeros(vec![chunk.len()]), 1.0);
                        tape.backward(loss);
                    }
                }
            }
        }
        Ok(())
    };
    pass()?;
    let reps = reps.max(3);
    let start = Instant::now();
    for _ in 0..reps {
        pass()?;
    }
    Ok(start.elapsed().as_secs_f64() / (reps * frames) as f64)
}

/// Per-frame predictions of one demonstration next to its labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityTrace {
    pub demo_id: String,
    pub probs: Vec<f64>,
    pub labels: Vec<u8>,
    pub timing: Option<Vec<f64>>,
}

impl ProbabilityTrace {
    /// `frame,prob,label[,timing_pred]`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,prob,label");
        if self.timing.is_some() {
            out.push_str(",timing_pred");
        }
        out.push('\n');
        for (i, (p, y)) in self.probs.iter().zip(&self.labels).enumerate() {
            out.push_str(&format!("{i},{p},{y}"));
            if let Some(t) = &self.timing {
                out.push_str(&format!(",{}", t[i]));
            }
            out.push('\n');
        }
        out
    }

    pub fn confusion(&self) -> Result<ConfusionCounts> {
        confusion(&self.probs, &self.labels, DEFAULT_THRESHOLD)
    }

    /// Writes `trace_<demo>.csv` and `trace_<demo>.png` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| SclError::io(dir, e))?;
        let csv = dir.join(format!("trace_{}.csv", self.demo_id));
        fs::write(&csv, self.to_csv()).map_err(|e| SclError::io(&csv, e))?;
        let xs = |v: &[f64]| v.iter().enumerate().map(|(i, &p)| (i as f64, p)).collect::<Vec<_>>();
        let labels: Vec<f64> = self.labels.iter().map(|&y| f64::from(y)).collect();
        let mut series = vec![
            Series::new("label", xs(&labels)),
            Series::new("prob", xs(&self.probs)),
        ];
        if let Some(t) = &self.timing {
            series.push(Series::new("timing", xs(t)));
        }
        let bounds = Bounds {
            x: (0.0, (self.probs.len().max(2) - 1) as f64),
            y: (0.0, 1.0),
        };
        line_plot(&series, Some(bounds), &dir.join(format!("trace_{}.png", self.demo_id)))
    }
}

pub fn probability_trace(model: &ModelHandle, demo: &PreparedDemo) -> Result<ProbabilityTrace> {
    let pred = model.predict_demo(demo)?;
    Ok(ProbabilityTrace {
        demo_id: demo.demo_id.clone(),
        probs: pred.probs,
        labels: demo.labels.clone(),
        timing: pred.timing,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub acc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
    pub tpr: f64,
    pub tnr: f64,
    pub test_time_per_image_s: f64,
}

impl TaskMetrics {
    fn fields(&self) -> [f64; 8] {
        [
            self.acc,
            self.precision,
            self.recall,
            self.f1,
            self.auc,
            self.tpr,
            self.tnr,
            self.test_time_per_image_s,
        ]
    }

    fn from_fields(f: [f64; 8]) -> Self {
        Self {
            acc: f[0],
            precision: f[1],
            recall: f[2],
            f1: f[3],
            auc: f[4],
            tpr: f[5],
            tnr: f[6],
            test_time_per_image_s: f[7],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub arch: ArchId,
    pub per_task: BTreeMap<String, TaskMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: TaskMetrics,
    pub train_time_per_image_s: f64,
}

impl MetricsReport {
    pub fn new(arch: ArchId, per_task: BTreeMap<String, TaskMetrics>, train_time_per_image_s: f64) -> Result<Self> {
        if per_task.is_empty() {
            return Err(SclError::InsufficientData("a report needs at least one task".into()));
        }
        let n = per_task.len() as f64;
        let mut sums = [0.0; 8];
        for m in per_task.values() {
            for (s, v) in sums.iter_mut().zip(m.fields()) {
                *s += v;
            }
        }
        Ok(Self {
            arch,
            macro_avg: TaskMetrics::from_fields(sums.map(|s| s / n)),
            per_task,
            train_time_per_image_s,
        })
    }

    /// Pearson correlations between the per-task ACC, F1 and AUC columns,
    /// keyed `acc_f1`, `acc_auc`, `f1_auc`. Undefined pairs are omitted.
    pub fn correlations(&self) -> BTreeMap<String, f64> {
        let col = |f: fn(&TaskMetrics) -> f64| self.per_task.values().map(f).collect::<Vec<_>>();
        let (acc, f1, au) = (col(|m| m.acc), col(|m| m.f1), col(|m| m.auc));
        let mut out = BTreeMap::new();
        for (name, a, b) in [("acc_f1", &acc, &f1), ("acc_auc", &acc, &au), ("f1_auc", &f1, &au)] {
            if let Ok(r) = pearson(a, b) {
                out.insert(name.to_string(), r);
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| SclError::io(dir, e))?;
        }
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| SclError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SclError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    /// Measure test time per image; otherwise it is reported as 0.
    pub measure_time: bool,
    pub timing_reps: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            measure_time: true,
            timing_reps: 3,
        }
    }
}

/// Metrics over all test frames of a task, pooled across demonstrations,
/// plus one trace per test demonstration.
pub fn evaluate_task(model: &ModelHandle, task: &PreparedTask, opts: &EvalOptions) -> Result<(TaskMetrics, Vec<ProbabilityTrace>)> {
    if task.test.is_empty() {
        return Err(SclError::InsufficientData(format!("task {} has no test demonstrations", task.task_id)));
    }
    let traces = task
        .test
        .iter()
        .map(|d| probability_trace(model, d))
        .collect::<Result<Vec<_>>>()?;
    let probs: Vec<f64> = traces.iter().flat_map(|t| t.probs.iter().copied()).collect();
    let labels: Vec<u8> = traces.iter().flat_map(|t| t.labels.iter().copied()).collect();
    let m = basic_metrics(confusion(&probs, &labels, DEFAULT_THRESHOLD)?);
    let test_time = if opts.measure_time {
        time_per_image(model, &task.test, TimingMode::Test, opts.timing_reps)?
    } else {
        0.0
    };
    let metrics = TaskMetrics {
        acc: m.acc,
        precision: m.precision,
        recall: m.recall,
        f1: m.f1,
        auc: auc(&probs, &labels)?,
        tpr: m.tpr,
        tnr: m.tnr,
        test_time_per_image_s: test_time,
    };
    Ok((metrics, traces))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arch: ArchId,
    pub demos: usize,
    pub seed: u64,
    pub acc: f64,
    pub f1: f64,
    pub auc: f64,
}

/// Trains on the first `k` training demonstrations of a per-seed shuffle
/// for each `k` in `counts`, evaluating on the full test split.
pub fn ablate_demo_count(model_cfg: &ModelConfig, task: &PreparedTask, train_cfg: &TrainConfig, counts: &[usize], seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let max = counts.iter().copied().max().unwrap_or(0);
    if counts.is_empty() || seeds.is_empty() || counts.contains(&0) {
        return Err(SclError::Config("ablation needs non-empty positive counts and at least one seed".into()));
    }
    if task.train.len() < max {
        return Err(SclError::InsufficientData(format!(
            "ablation up to {max} demonstrations but only {} available",
            task.train.len()
        )));
    }
    let opts = EvalOptions {
        measure_time: false,
        ..EvalOptions::default()
    };
    let mut rows = Vec::with_capacity(counts.len() * seeds.len());
    for &seed in seeds {
        let mut order: Vec<usize> = (0..task.train.len()).collect();
        order.shuffle(&mut component_rng(seed, "ablation/demos"));
        for &k in counts {
            let subset = task.train_subset(&order[..k]);
            let mut model = build_model(&ModelConfig {
                seed,
                ..model_cfg.clone()
            })?;
            let cfg = TrainConfig {
                seed,
                ..train_cfg.clone()
            };
            train(&mut model, &subset, &cfg, None)?;
            let (m, _) = evaluate_task(&model, &subset, &opts)?;
            log::info!("ablation {} demos={k} seed={seed}: acc {:.4}", model_cfg.arch, m.acc);
            rows.push(AblationRow {
                arch: model_cfg.arch,
                demos: k,
                seed,
                acc: m.acc,
                f1: m.f1,
                auc: m.auc,
            });
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("arch,demos,seed,acc,f1,auc\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{},{}\n", r.arch, r.demos, r.seed, r.acc, r.f1, r.auc));
    }
    out
}

/// Median of the finite values; `None` when there are none.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Median accuracy per demo count, in increasing count order.
pub fn ablation_medians(rows: &[AblationRow]) -> Vec<(usize, f64)> {
    let mut by_count: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in rows {
        by_count.entry(r.demos).or_default().push(r.acc);
    }
    by_count
        .into_iter()
        .filter_map(|(k, v)| median(&v).map(|m| (k, m)))
        .collect()
}

/// Writes `ablation.csv` and `ablation.png` (median accuracy per count).
pub fn write_ablation(rows: &[AblationRow], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SclError::io(dir, e))?;
    let csv = dir.join("ablation.csv");
    fs::write(&csv, ablation_csv(rows)).map_err(|e| SclError::io(&csv, e))?;
    let pts = ablation_medians(rows)
        .into_iter()
        .map(|(k, m)| (k as f64, m))
        .collect();
    line_plot(&[Series::new("median acc", pts)], None, &dir.join("ablation.png"))
}

/// One polyline of a plot.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: &str, points: Vec<(f64, f64)>) -> Self {
        Self {
            name: name.to_string(),
            points,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Bounds {
    pub x: (f64, f64),
    pub y: (f64, f64),
}

const PLOT_W: u32 = 640;
const PLOT_H: u32 = 360;
const MARGIN: u32 = 30;
const PALETTE: [[u8; 3]; 6] = [
    [120, 120, 120],
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
];

fn data_bounds(series: &[Series]) -> Bounds {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return Bounds { x: (0.0, 1.0), y: (0.0, 1.0) };
    }
    let widen = |a: f64, b: f64| if a == b { (a - 0.5, b + 0.5) } else { (a, b) };
    Bounds {
        x: widen(x0, x1),
        y: widen(y0, y1),
    }
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = (a.0 + (b.0 - a.0) * t).round();
        let y = (a.1 + (b.1 - a.1) * t).round();
        for (dx, dy) in [(0, 0), (1, 0), (0, 1)] {
            let (px, py) = (x as i64 + dx, y as i64 + dy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, color);
            }
        }
    }
}

/// Renders the series as polylines on a white canvas with axes and saves a
/// PNG. Series colors follow their order.
pub fn line_plot(series: &[Series], bounds: Option<Bounds>, path: &Path) -> Result<()> {
    let b = bounds.unwrap_or_else(|| data_bounds(series));
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    let (w, h) = ((PLOT_W - 2 * MARGIN) as f64, (PLOT_H - 2 * MARGIN) as f64);
    let to_px = |(x, y): (f64, f64)| {
        let u = (x - b.x.0) / (b.x.1 - b.x.0);
        let v = (y - b.y.0) / (b.y.1 - b.y.0);
        (MARGIN as f64 + u * w, MARGIN as f64 + (1.0 - v) * h)
    };
    let axis = Rgb([0, 0, 0]);
    let origin = (MARGIN as f64, (PLOT_H - MARGIN) as f64);
    draw_line(&mut img, origin, ((PLOT_W - MARGIN) as f64, origin.1), axis);
    draw_line(&mut img, origin, (origin.0, MARGIN as f64), axis);
    for (i, s) in series.iter().enumerate() {
        let color = Rgb(PALETTE[i % PALETTE.len()]);
        let pts: Vec<_> = s.points.iter().filter(|(x, y)| x.is_finite() && y.is_finite()).map(|&p| to_px(p)).collect();
        for pair in pts.windows(2) {
            draw_line(&mut img, pair[0], pair[1], color);
        }
        if pts.len() == 1 {
            draw_line(&mut img, (pts[0].0 - 3.0, pts[0].1), (pts[0].0 + 3.0, pts[0].1), color);
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| SclError::io(dir, e))?;
    }
    img.save(path).map_err(|e| SclError::io(path, std::io::Error::other(e)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_examples() {
        let c = confusion(&[0.9, 0.1], &[1, 0], 0.5).unwrap();
        assert_eq!((c.tp, c.tn, c.fp, c.fn_), (1, 1, 0, 0));
        let c = confusion(&[0.5; 4], &[1, 0, 0, 1], 0.5).unwrap();
        assert_eq!((c.tp, c.fp), (2, 2));
        assert!(confusion(&[], &[], 0.5).is_err());
        assert!(confusion(&[0.3], &[1], 1.0).is_err());
    }

    #[test]
    fn metric_conventions() {
        let m = basic_metrics(ConfusionCounts { tp: 1, tn: 1, fp: 0, fn_: 0 });
        assert_eq!((m.acc, m.f1, m.tnr), (1.0, 1.0, 1.0));
        let m = basic_metrics(ConfusionCounts { tp: 0, tn: 5, fp: 0, fn_: 3 });
        assert_eq!((m.precision, m.f1), (0.0, 0.0));
        let m = basic_metrics(ConfusionCounts { tp: 911, tn: 975, fp: 25, fn_: 89 });
        assert!((m.tpr - 0.911).abs() < 1e-12 && (m.tnr - 0.975).abs() < 1e-12);
        assert_eq!(basic_metrics(ConfusionCounts { tp: 2, tn: 0, fp: 0, fn_: 0 }).tnr, 0.0);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.4; 5], &[0, 1, 0, 1, 1]).unwrap(), 0.5);
        assert_eq!(auc(&[0.9, 0.1], &[0, 1]).unwrap(), 0.0);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(SclError::UndefinedMetric(_))));
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 4.0, 7.0];
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let y: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &y).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(pearson(&x, &[1.0; 4]), Err(SclError::UndefinedMetric(_))));
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn macro_is_mean_of_tasks() {
        let t = |a: f64| TaskMetrics {
            acc: a,
            precision: a / 2.0,
            recall: 0.3,
            f1: a * a,
            auc: 1.0 - a,
            tpr: 0.3,
            tnr: a,
            test_time_per_image_s: 0.01,
        };
        let per = BTreeMap::from([("a".to_string(), t(0.2)), ("b".to_string(), t(0.9))]);
        let r = MetricsReport::new(ArchId::Fcn, per, 0.1).unwrap();
        assert!((r.macro_avg.acc - 0.55).abs() < 1e-12);
        assert!((r.macro_avg.f1 - (0.04 + 0.81) / 2.0).abs() < 1e-12);
        let json = serde_json::to_value(&r).unwrap();
        assert!(json.get("macro").is_some() && json.get("per_task").is_some());
        assert_eq!(r.correlations().len(), 3);
    }

    #[test]
    fn medians_and_csv() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0]), Some(2.5));
        assert_eq!(median(&[]), None);
        let rows = vec![AblationRow {
            arch: ArchId::Fcn,
            demos: 1,
            seed: 0,
            acc: 0.5,
            f1: 0.25,
            auc: 0.75,
        }];
        assert_eq!(ablation_csv(&rows), "arch,demos,seed,acc,f1,auc\nFCN,1,0,0.5,0.25,0.75\n");
    }

    #[test]
    fn trace_csv_and_plot() {
        let t = ProbabilityTrace {
            demo_id: "d0".into(),
            probs: vec![0.1, 0.7],
            labels: vec![0, 1],
            timing: Some(vec![0.0, 1.0]),
        };
        assert_eq!(t.to_csv(), "frame,prob,label,timing_pred\n0,0.1,0,0\n1,0.7,1,1\n");
        let dir = tempfile::tempdir().unwrap();
        t.write(dir.path()).unwrap();
        assert!(dir.path().join("trace_d0.png").exists());
        let img = image::open(dir.path().join("trace_d0.png")).unwrap();
        assert_eq!((img.width(), img.height()), (PLOT_W, PLOT_H));
    }
}
