//! The `synth`, `train`, `eval`, `ablate` and `compare` commands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use scl_core::dataset::{load_manifest, prepare_task, PreparedTask, TaskDataset};
use scl_core::evaluation::{
    ablate_demo_count, ablation_medians, evaluate_task, median, time_per_image, write_ablation, AblationRow,
    MetricsReport, TaskMetrics, TimingMode,
};
use scl_core::models::{build_model, ArchId, ModelHandle};
use scl_core::synthgen::{generate, generate_to_dir, SynthConfig};
use scl_core::training::{train, RunRecord};
use scl_core::SclError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{DatasetSource, RunConfig};

pub const CACHE_ENV: &str = "SCL_CACHE_DIR";
pub const METRICS_FILE: &str = "metrics.json";
pub const RUN_FILE: &str = "run.json";
pub const CONFIG_FILE: &str = "config.json";

/// Settings shared by every command, after command-line overrides.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub config: RunConfig,
    pub out: PathBuf,
    pub force: bool,
    pub jobs: usize,
}

/// Runs of a comparison that did not complete.
#[derive(Debug, Error)]
#[error("{failed} of {total} runs failed{}", if *.numerical { " (numerical failure)" } else { "" })]
pub struct PartialFailure {
    pub failed: usize,
    pub total: usize,
    pub numerical: bool,
}

/// `run.json`: the final training stage, earlier stages and the config that
/// reproduces them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunFile {
    pub task_id: String,
    pub run_config: RunConfig,
    pub stages: Vec<RunRecord>,
}

/// Refuses to write into a non-empty directory unless `force` is set, in
/// which case the directory is cleared first.
fn claim_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if non_empty {
            if !force {
                bail!(SclError::Config(format!(
                    "output directory {} is not empty; pass --force to overwrite",
                    dir.display()
                )));
            }
            fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn synth_cached(cfg: &SynthConfig) -> Result<TaskDataset> {
    let Some(root) = std::env::var_os(CACHE_ENV) else {
        return Ok(generate(cfg)?);
    };
    let dir = PathBuf::from(root).join(DatasetSource::cache_key(cfg)?);
    if let Ok(ds) = load_manifest(&dir) {
        log::info!("dataset {} from cache {}", cfg.task_id, dir.display());
        return Ok(ds);
    }
    // Write beside the final location and rename so concurrent runs never
    // observe a half-written cache entry.
    let tmp = dir.with_extension(format!("tmp{}", std::process::id()));
    let _ = fs::remove_dir_all(&tmp);
    let (ds, _) = generate_to_dir(cfg, &tmp)?;
    if fs::rename(&tmp, &dir).is_err() {
        let _ = fs::remove_dir_all(&tmp);
    }
    Ok(ds)
}

pub fn load_dataset(src: &DatasetSource) -> Result<TaskDataset> {
    Ok(match src {
        DatasetSource::Synth(cfg) => synth_cached(cfg)?,
        DatasetSource::Manifest(path) => load_manifest(path)?,
    })
}

/// Loads and preprocesses every task of the config at the model input size.
pub fn load_tasks(config: &RunConfig) -> Result<Vec<PreparedTask>> {
    let size = config.model.backbone.input_size;
    let mut tasks = Vec::new();
    for src in &config.datasets {
        let ds = load_dataset(src)?;
        let task = prepare_task(&ds, size)?;
        if tasks.iter().any(|t: &PreparedTask| t.task_id == task.task_id) {
            bail!(SclError::Config(format!("task id `{}` appears twice", task.task_id)));
        }
        tasks.push(task);
    }
    Ok(tasks)
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetSummary {
    pub task_id: String,
    pub path: PathBuf,
    pub train_demos: usize,
    pub test_demos: usize,
    pub train_frames: usize,
    pub test_frames: usize,
    pub train_success_fraction: f64,
    pub test_success_fraction: f64,
}

/// Renders every synthetic dataset of the config into `out/<task_id>/`.
pub fn cmd_synth(ctx: &Ctx) -> Result<Vec<DatasetSummary>> {
    let synths: Vec<&SynthConfig> = ctx
        .config
        .datasets
        .iter()
        .filter_map(|d| match d {
            DatasetSource::Synth(s) => Some(s),
            DatasetSource::Manifest(_) => None,
        })
        .collect();
    if synths.is_empty() {
        bail!(SclError::Config("config has no synth datasets".into()));
    }
    let mut out = Vec::new();
    for s in synths {
        let dir = ctx.out.join(&s.task_id);
        claim_dir(&dir, ctx.force)?;
        let (ds, _) = generate_to_dir(s, &dir)?;
        let c = ds.counts();
        let frac = |succ: usize, non: usize| if succ + non == 0 { 0.0 } else { succ as f64 / (succ + non) as f64 };
        let summary = DatasetSummary {
            task_id: ds.task_id.clone(),
            path: dir,
            train_demos: ds.train_demos.len(),
            test_demos: ds.test_demos.len(),
            train_frames: c.train_success + c.train_non_success,
            test_frames: c.test_success + c.test_non_success,
            train_success_fraction: frac(c.train_success, c.train_non_success),
            test_success_fraction: frac(c.test_success, c.test_non_success),
        };
        println!(
            "{}: train {} demos / {} frames ({:.1}% success), test {} demos / {} frames ({:.1}% success) -> {}",
            summary.task_id,
            summary.train_demos,
            summary.train_frames,
            100.0 * summary.train_success_fraction,
            summary.test_demos,
            summary.test_frames,
            100.0 * summary.test_success_fraction,
            summary.path.display()
        );
        out.push(summary);
    }
    Ok(out)
}

/// Trains one model per task into `dir/<task_id>/`.
fn train_tasks(config: &RunConfig, arch: ArchId, seed: u64, tasks: &[PreparedTask], dir: &Path) -> Result<Vec<RunFile>> {
    let resolved = config.resolved(seed, arch);
    write_json(&dir.join(CONFIG_FILE), &resolved)?;
    let mut files = Vec::new();
    for task in tasks {
        let task_dir = dir.join(&task.task_id);
        fs::create_dir_all(&task_dir)?;
        let mut model = build_model(&config.model_config(arch, seed))?;
        log::info!(
            "training {arch} on {} ({} frames, seed {seed}, {} params)",
            task.task_id,
            task.num_train_frames(),
            model.num_params()
        );
        let stages = train(&mut model, task, &config.train_config(seed), Some(&task_dir))?;
        let (last, earlier) = stages.split_last().expect("training yields at least one stage");
        for s in earlier {
            s.write(&task_dir, &format!("{}_", s.stage))?;
        }
        fs::write(task_dir.join("curves.csv"), last.curves_csv())?;
        let file = RunFile {
            task_id: task.task_id.clone(),
            run_config: resolved.clone(),
            stages: stages.clone(),
        };
        write_json(&task_dir.join(RUN_FILE), &file)?;
        for w in &last.warnings {
            log::warn!("{}: {w}", task.task_id);
        }
        files.push(file);
    }
    Ok(files)
}

pub fn cmd_train(ctx: &Ctx) -> Result<Vec<RunFile>> {
    let tasks = load_tasks(&ctx.config)?;
    for t in &tasks {
        claim_dir(&ctx.out.join(&t.task_id), ctx.force)?;
    }
    let cfg = &ctx.config;
    let files = train_tasks(cfg, cfg.arch, cfg.run_seed(), &tasks, &ctx.out)?;
    for f in &files {
        let last = f.stages.last().expect("non-empty stages");
        println!(
            "{} {}: {} epochs, final train loss {:.4}, best val acc {}",
            last.arch,
            f.task_id,
            last.epochs.len(),
            last.train_losses().last().copied().unwrap_or(f64::NAN),
            last.best_val_acc.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
        );
    }
    Ok(files)
}

fn load_checkpoint(dir: &Path) -> Result<ModelHandle> {
    if !dir.is_dir() {
        bail!(SclError::Config(format!("checkpoint {} does not exist", dir.display())));
    }
    Ok(ModelHandle::load(dir)?)
}

/// Evaluates the checkpoints under `dir/<task_id>/checkpoint` (or the single
/// `checkpoint` override), writing traces next to them and `metrics.json`.
fn eval_tasks(
    config: &RunConfig,
    tasks: &[PreparedTask],
    dir: &Path,
    checkpoint: Option<&Path>,
) -> Result<MetricsReport> {
    let opts = config.eval.options();
    let mut per_task = BTreeMap::new();
    let mut arch = None;
    let mut train_times = Vec::new();
    for task in tasks {
        let task_dir = dir.join(&task.task_id);
        let ckpt = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| task_dir.join("checkpoint"));
        let model = load_checkpoint(&ckpt)?;
        if *arch.get_or_insert(model.arch()) != model.arch() {
            bail!(SclError::Config("checkpoints of one report must share an architecture".into()));
        }
        if model.input_size() != config.model.backbone.input_size {
            bail!(SclError::Config(format!(
                "checkpoint expects {}px inputs but the config prepares {}px frames",
                model.input_size(),
                config.model.backbone.input_size
            )));
        }
        let (metrics, traces) = evaluate_task(&model, task, &opts)?;
        let trace_dir = task_dir.join("traces");
        for t in &traces {
            t.write(&trace_dir)?;
        }
        if opts.measure_time {
            train_times.push(time_per_image(&model, &task.train, TimingMode::Train, opts.timing_reps)?);
        }
        log::info!("{} {}: acc {:.4} f1 {:.4} auc {:.4}", model.arch(), task.task_id, metrics.acc, metrics.f1, metrics.auc);
        per_task.insert(task.task_id.clone(), metrics);
    }
    let train_time = if train_times.is_empty() {
        0.0
    } else {
        train_times.iter().sum::<f64>() / train_times.len() as f64
    };
    let report = MetricsReport::new(arch.expect("at least one task"), per_task, train_time)?;
    report.write(&dir.join(METRICS_FILE))?;
    Ok(report)
}

pub fn cmd_eval(ctx: &Ctx, checkpoint: Option<&Path>) -> Result<MetricsReport> {
    let tasks = load_tasks(&ctx.config)?;
    if checkpoint.is_some() && tasks.len() > 1 {
        bail!(SclError::Config("--checkpoint needs a config with exactly one dataset".into()));
    }
    let report = eval_tasks(&ctx.config, &tasks, &ctx.out, checkpoint)?;
    let m = &report.macro_avg;
    println!(
        "{} over {} task(s): acc {:.4} precision {:.4} recall {:.4} f1 {:.4} auc {:.4}",
        report.arch,
        report.per_task.len(),
        m.acc,
        m.precision,
        m.recall,
        m.f1,
        m.auc
    );
    Ok(report)
}

/// Runs `work` over `items` on up to `jobs` threads, keeping input order.
fn fan_out<T: Sync, R: Send>(items: &[T], jobs: usize, work: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(work).collect();
    }
    let next = Mutex::new(0usize);
    let results: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().unwrap();
                    let i = *n;
                    *n += 1;
                    i
                };
                if i >= items.len() {
                    break;
                }
                let r = work(&items[i]);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    results.into_inner().unwrap().into_iter().map(|r| r.expect("every item ran")).collect()
}

pub fn cmd_ablate(ctx: &Ctx) -> Result<BTreeMap<String, Vec<AblationRow>>> {
    let cfg = &ctx.config;
    let tasks = load_tasks(cfg)?;
    let model_cfg = cfg.model_config(cfg.arch, cfg.run_seed());
    let mut all = BTreeMap::new();
    for task in &tasks {
        let dir = ctx.out.join(&task.task_id);
        claim_dir(&dir, ctx.force)?;
        let per_seed = fan_out(&cfg.ablation.seeds, ctx.jobs, |&seed| {
            ablate_demo_count(&model_cfg, task, &cfg.train, &cfg.ablation.counts, &[seed])
        });
        let mut rows = Vec::new();
        for r in per_seed {
            rows.extend(r?);
        }
        write_ablation(&rows, &dir)?;
        for (k, m) in ablation_medians(&rows) {
            println!("{} {} demos={k}: median acc {m:.4}", cfg.arch, task.task_id);
        }
        all.insert(task.task_id.clone(), rows);
    }
    Ok(all)
}

/// One line of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub arch: ArchId,
    /// `ok`, or `failed: <reason>` when any seed failed.
    pub status: String,
    pub seeds: usize,
    pub metrics: Option<MetricsReport>,
}

/// Per-task, per-field median over seed reports.
fn median_report(arch: ArchId, reports: &[MetricsReport]) -> Result<MetricsReport> {
    let first = &reports[0];
    let mut per_task = BTreeMap::new();
    for task in first.per_task.keys() {
        let col = |f: fn(&TaskMetrics) -> f64| median(&reports.iter().map(|r| f(&r.per_task[task])).collect::<Vec<_>>()).unwrap_or(0.0);
        per_task.insert(
            task.clone(),
            TaskMetrics {
                acc: col(|m| m.acc),
                precision: col(|m| m.precision),
                recall: col(|m| m.recall),
                f1: col(|m| m.f1),
                auc: col(|m| m.auc),
                tpr: col(|m| m.tpr),
                tnr: col(|m| m.tnr),
                test_time_per_image_s: col(|m| m.test_time_per_image_s),
            },
        );
    }
    let train_time = median(&reports.iter().map(|r| r.train_time_per_image_s).collect::<Vec<_>>()).unwrap_or(0.0);
    Ok(MetricsReport::new(arch, per_task, train_time)?)
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from("arch,status,seeds,acc,precision,recall,f1,auc,train_time_per_image_s,test_time_per_image_s\n");
    for r in rows {
        match &r.metrics {
            Some(m) => {
                let a = &m.macro_avg;
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{}\n",
                    r.arch,
                    r.status,
                    r.seeds,
                    a.acc,
                    a.precision,
                    a.recall,
                    a.f1,
                    a.auc,
                    m.train_time_per_image_s,
                    a.test_time_per_image_s
                ));
            }
            None => out.push_str(&format!("{},\"{}\",{},,,,,,,\n", r.arch, r.status.replace('"', "'"), r.seeds)),
        }
    }
    out
}

pub fn comparison_markdown(rows: &[ComparisonRow]) -> String {
    let mut out = String::from(
        "| Architecture | ACC | Precision | Recall | F1 | AUC | Train time/img (s) | Test time/img (s) | Status |\n\
         |---|---|---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        match &r.metrics {
            Some(m) => {
                let a = &m.macro_avg;
                out.push_str(&format!(
                    "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {} |\n",
                    r.arch,
                    a.acc,
                    a.precision,
                    a.recall,
                    a.f1,
                    a.auc,
                    m.train_time_per_image_s,
                    a.test_time_per_image_s,
                    r.status
                ));
            }
            None => out.push_str(&format!("| {} | - | - | - | - | - | - | - | {} |\n", r.arch, r.status)),
        }
    }
    out
}

/// Trains and evaluates every requested architecture over the comparison
/// seeds into `out/<arch>/seed_<s>/`, then aggregates seed medians into
/// `out/<arch>/metrics.json` and the comparison tables.
pub fn cmd_compare(ctx: &Ctx) -> Result<Vec<ComparisonRow>> {
    let cfg = &ctx.config;
    let tasks = load_tasks(cfg)?;
    let seeds = if cfg.compare.seeds.is_empty() {
        vec![cfg.run_seed()]
    } else {
        cfg.compare.seeds.clone()
    };
    for a in &cfg.compare.archs {
        claim_dir(&ctx.out.join(a.as_str()), ctx.force)?;
    }
    let runs: Vec<(ArchId, u64)> = cfg
        .compare
        .archs
        .iter()
        .flat_map(|&a| seeds.iter().map(move |&s| (a, s)))
        .collect();
    let outcomes = fan_out(&runs, ctx.jobs, |&(arch, seed)| -> Result<MetricsReport> {
        let dir = ctx.out.join(arch.as_str()).join(format!("seed_{seed}"));
        train_tasks(cfg, arch, seed, &tasks, &dir)?;
        eval_tasks(cfg, &tasks, &dir, None)
    });
    let mut rows = Vec::new();
    let (mut failed, mut numerical) = (0, false);
    for &arch in &cfg.compare.archs {
        let mut reports = Vec::new();
        let mut errors = Vec::new();
        for ((a, seed), res) in runs.iter().zip(&outcomes) {
            if *a != arch {
                continue;
            }
            match res {
                Ok(r) => reports.push(r.clone()),
                Err(e) => {
                    log::error!("{arch} seed {seed} failed: {e:#}");
                    failed += 1;
                    numerical |= e.downcast_ref::<SclError>().is_some_and(SclError::is_numerical);
                    errors.push(format!("seed {seed}: {e}"));
                }
            }
        }
        let row = if errors.is_empty() {
            let report = median_report(arch, &reports)?;
            report.write(&ctx.out.join(arch.as_str()).join(METRICS_FILE))?;
            ComparisonRow {
                arch,
                status: "ok".into(),
                seeds: reports.len(),
                metrics: Some(report),
            }
        } else {
            ComparisonRow {
                arch,
                status: format!("failed: {}", errors.join("; ")),
                seeds: seeds.len(),
                metrics: None,
            }
        };
        rows.push(row);
    }
    fs::write(ctx.out.join("comparison.csv"), comparison_csv(&rows))?;
    let md = comparison_markdown(&rows);
    fs::write(ctx.out.join("comparison.md"), &md)?;
    print!("{md}");
    if failed > 0 {
        bail!(PartialFailure {
            failed,
            total: runs.len(),
            numerical,
        });
    }
    Ok(rows)
}

/// Process exit code for an error: 3 for numerical failures, 2 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(p) = cause.downcast_ref::<PartialFailure>() {
            return if p.numerical { 3 } else { 2 };
        }
        if let Some(e) = cause.downcast_ref::<SclError>() {
            return if e.is_numerical() { 3 } else { 2 };
        }
    }
    2
}
