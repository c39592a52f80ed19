//! Acceptance run: every criterion prints one PASS/FAIL line. Pass criterion
//! numbers as arguments to run a subset, e.g.
//! `cargo test -p scl-cli --test acceptance -- 1 3 10`.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use ndarray::{s, Array2, ArrayD, Ix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scl_autograd::nn::{Init, Linear};
use scl_autograd::{ParamStore, Tape};
use scl_cli::RunFile;
use scl_core::backbones::BackboneConfig;
use scl_core::dataset::{
    convert_kitchen, convert_mime, load_manifest, make_windows, prepare_task, timing_targets_for_len, PreparedTask,
    TaskDataset, UnlabeledFrames,
};
use scl_core::evaluation::{auc, basic_metrics, confusion, median, pearson, probability_trace, ConfusionCounts, MetricsReport};
use scl_core::models::{build_model, grl_apply, ArchId, HeadConfig, ModelConfig, ModelHandle};
use scl_core::seq2seq::{DecodeMode, SeqBatch, SeqConfig, SeqHead, SeqKind};
use scl_core::synthgen::{generate, generate_to_dir, ShiftSpec, SynthConfig};
use scl_core::training::{
    train, train_adda, train_dann, train_multitask, train_supervised, AddaConfig, CheckpointSelection, GrlSchedule,
    LossWeights, TrainConfig,
};
use scl_testkit::{ingestion_fixtures, write_raw_layout, Layout};
use sha2::{Digest, Sha256};

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Result<String>,
}

const MIN: u64 = 60;

fn criteria() -> Vec<Criterion> {
    vec![
        Criterion { id: 1, name: "GRL law", budget: Duration::from_secs(MIN), run: grl_law },
        Criterion { id: 2, name: "timing targets", budget: Duration::from_secs(1), run: timing_targets },
        Criterion { id: 3, name: "metric oracles", budget: Duration::from_secs(MIN), run: metric_oracles },
        Criterion { id: 4, name: "overfit smoke, 8 architectures", budget: Duration::from_secs(30 * MIN), run: overfit_all },
        Criterion { id: 5, name: "reduction identities", budget: Duration::from_secs(10 * MIN), run: reductions },
        Criterion { id: 6, name: "domain-adaptation benefit", budget: Duration::from_secs(120 * MIN), run: adaptation_benefit },
        Criterion { id: 7, name: "combined-model ordering", budget: Duration::from_secs(120 * MIN), run: combined_ordering },
        Criterion { id: 8, name: "timing-head benefit", budget: Duration::from_secs(60 * MIN), run: timing_benefit },
        Criterion { id: 9, name: "demo-count ablation shape", budget: Duration::from_secs(120 * MIN), run: ablation_shape },
        Criterion { id: 10, name: "sequence-model contracts", budget: Duration::from_secs(15 * MIN), run: sequence_contracts },
        Criterion { id: 11, name: "ingestion fidelity", budget: Duration::from_secs(MIN), run: ingestion },
        Criterion { id: 12, name: "end-to-end CLI", budget: Duration::from_secs(30 * MIN), run: end_to_end },
    ]
}

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut ran = 0;
    for c in criteria() {
        if !wanted.is_empty() && !wanted.contains(&c.id) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(anyhow::anyhow!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > c.budget => Err(anyhow::anyhow!("{detail}; took {elapsed:.0?}, budget {:?}", c.budget)),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("criterion {:>2} {}: PASS ({detail}; {:.1}s)", c.id, c.name, elapsed.as_secs_f64()),
            Err(e) => {
                failed += 1;
                println!("criterion {:>2} {}: FAIL ({e:#}; {:.1}s)", c.id, c.name, elapsed.as_secs_f64());
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- helpers

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    ArrayD::from_shape_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn scl(args: &[&str], envs: &[(&str, &Path)]) -> Result<()> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_scl"));
    cmd.args(args).env("RUST_LOG", "warn").env_remove("SCL_CACHE_DIR");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    let out = cmd.output().context("running scl")?;
    ensure!(
        out.status.success(),
        "scl {} exited with {}: {}",
        args.join(" "),
        out.status,
        String::from_utf8_lossy(&out.stderr).trim()
    );
    Ok(())
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn same_params(a: &ParamStore, b: &ParamStore, prefix: &str) -> bool {
    a.ids_with_prefix(prefix).all(|id| {
        let other = b.id(a.name(id)).expect("same layout");
        a.get(id).iter().zip(b.get(other).iter()).all(|(x, y)| x.to_bits() == y.to_bits())
    })
}

fn read_csv(path: &Path) -> Result<Vec<BTreeMap<String, String>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().context("empty csv")?.split(',').collect();
    Ok(lines
        .map(|l| header.iter().map(|h| h.to_string()).zip(l.split(',').map(str::to_string)).collect())
        .collect())
}

fn num(row: &BTreeMap<String, String>, key: &str) -> Result<f64> {
    row.get(key).with_context(|| format!("missing column {key}"))?.parse().with_context(|| format!("column {key}"))
}

// ---------------------------------------------------------------- 1

fn grl_law() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let l1 = Linear::new(&mut store, "l1", 3, 4, Init::XavierUniform, &mut rng);
    let l2 = Linear::new(&mut store, "l2", 4, 2, Init::XavierUniform, &mut rng);
    let x0 = uniform(&[5, 3], &mut rng);
    let loss = |store: &ParamStore, lambda: Option<f64>| {
        let mut tape = Tape::new();
        let x = tape.input_with_grad(x0.clone());
        let a = l1.forward(&mut tape, store, x);
        let a = match lambda {
            Some(l) => {
                let r = grl_apply(&mut tape, a, l).unwrap();
                assert_eq!(tape.value(r), tape.value(a), "forward must be the identity");
                r
            }
            None => a,
        };
        let h = tape.tanh(a);
        let y = l2.forward(&mut tape, store, h);
        let l = tape.sum_all(y);
        (tape, l, x)
    };
    let (tape, l, x) = loss(&store, None);
    let plain = tape.backward(l);
    let plain_x = plain.input(x).unwrap().clone();
    let plain_w = plain.param(l1.weight).unwrap().clone();

    // Finite differences of the GRL-free function.
    let eps = 1e-6;
    let mut fd = Vec::new();
    for k in 0..store.get(l1.weight).len() {
        let orig = store.get(l1.weight).as_slice().unwrap()[k];
        store.get_mut(l1.weight).as_slice_mut().unwrap()[k] = orig + eps;
        let (t, up, _) = loss(&store, None);
        let up = t.scalar(up);
        store.get_mut(l1.weight).as_slice_mut().unwrap()[k] = orig - eps;
        let (t, down, _) = loss(&store, None);
        let down = t.scalar(down);
        store.get_mut(l1.weight).as_slice_mut().unwrap()[k] = orig;
        fd.push((up - down) / (2.0 * eps));
    }

    let mut worst: f64 = 0.0;
    for lambda in [0.0, 0.5, 1.0] {
        let (tape, l, xr) = loss(&store, Some(lambda));
        let g = tape.backward(l);
        ensure!(g.input(xr).unwrap() == &plain_x.mapv(|v| -lambda * v), "input gradient at lambda {lambda}");
        let gw = g.param(l1.weight).unwrap();
        ensure!(gw == &plain_w.mapv(|v| -lambda * v), "weight gradient at lambda {lambda}");
        ensure!(g.param(l2.weight).unwrap() == plain.param(l2.weight).unwrap(), "downstream gradient changed");
        if lambda > 0.0 {
            let expected: Vec<f64> = fd.iter().map(|v| -lambda * v).collect();
            let diff: f64 = gw.iter().zip(&expected).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let norm = expected.iter().map(|v| v * v).sum::<f64>().sqrt();
            let rel = diff / norm;
            ensure!(rel <= 1e-3, "finite-difference rel err {rel:.2e} at lambda {lambda}");
            worst = worst.max(rel);
        }
    }
    Ok(format!("exact autodiff match, worst FD rel err {worst:.1e}"))
}

// ---------------------------------------------------------------- 2

fn timing_targets() -> Result<String> {
    for j in 2..=50usize {
        let y = timing_targets_for_len(j)?;
        ensure!(y.len() == j, "length for j={j}");
        ensure!(y[0] == 0.0 && y[j - 1] == 1.0, "endpoints for j={j}");
        for (t, v) in y.iter().enumerate() {
            // t/(j-1) as an exact rational check
            ensure!((v * (j - 1) as f64 - t as f64).abs() <= 1e-12, "y[{t}] for j={j}");
        }
    }
    ensure!(timing_targets_for_len(1).is_err(), "j=1 must be rejected");
    Ok("j = 2..50".into())
}

// ---------------------------------------------------------------- 3

fn metric_oracles() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ratio = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let mut auc_cases = 0;
    for case in 0..1000 {
        let n = rng.random_range(1..60);
        let probs: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..=20u8)) / 20.0).collect();
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.4))).collect();
        let mut bf = [0usize; 4];
        for i in 0..n {
            let k = match (probs[i] >= 0.5, labels[i] == 1) {
                (true, true) => 0,
                (false, false) => 1,
                (true, false) => 2,
                (false, true) => 3,
            };
            bf[k] += 1;
        }
        let c = confusion(&probs, &labels, 0.5)?;
        ensure!([c.tp, c.tn, c.fp, c.fn_] == bf, "confusion case {case}");
        let m = basic_metrics(c);
        let [tp, tn, fp, fn_] = bf.map(|v| v as f64);
        let (p, r) = (ratio(tp, tp + fp), ratio(tp, tp + fn_));
        ensure!(m.acc == (tp + tn) / n as f64, "acc case {case}");
        ensure!(m.precision == p && m.recall == r && m.tpr == r, "precision/recall case {case}");
        ensure!(m.f1 == ratio(2.0 * p * r, p + r), "f1 case {case}");
        ensure!(m.tnr == ratio(tn, tn + fp), "tnr case {case}");

        if auc_cases < 200 && labels.contains(&0) && labels.contains(&1) {
            let (mut num, mut pairs) = (0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    if labels[i] == 1 && labels[j] == 0 {
                        pairs += 1.0;
                        num += if probs[i] > probs[j] { 1.0 } else if probs[i] == probs[j] { 0.5 } else { 0.0 };
                    }
                }
            }
            ensure!((auc(&probs, &labels)? - num / pairs).abs() <= 1e-12, "auc case {case}");
            auc_cases += 1;
        }
    }
    ensure!(auc_cases == 200, "only {auc_cases} AUC cases");
    for case in 0..200 {
        let x: Vec<f64> = (0..20).map(|_| rng.random()).collect();
        let y: Vec<f64> = x.iter().map(|v| v + rng.random::<f64>()).collect();
        let n = 20.0;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
        let sx = (x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n).sqrt();
        let sy = (y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / n).sqrt();
        ensure!((pearson(&x, &y)? - cov / (sx * sy)).abs() <= 1e-12, "pearson case {case}");
    }
    Ok("1000 confusion cases, 200 AUC cases, 200 Pearson cases".into())
}

// ---------------------------------------------------------------- 4

fn overfit_task() -> Result<PreparedTask> {
    let cfg = SynthConfig {
        num_demos_train: 2,
        num_demos_test: 1,
        frames_per_demo: [30, 30],
        image_size: [48, 64],
        shift_spec: ShiftSpec::disabled(),
        seed: 3,
        ..SynthConfig::default()
    };
    Ok(prepare_task(&generate(&cfg)?, 32)?)
}

fn overfit_model(arch: ArchId, task: &PreparedTask) -> Result<ModelHandle> {
    let mut model = build_model(&ModelConfig {
        arch,
        backbone: BackboneConfig {
            input_size: 32,
            channels: vec![8, 16, 32],
            feature_dim: 64,
            ..BackboneConfig::default()
        },
        ..ModelConfig::default()
    })?;
    // batch 16, 100 epochs, learning rate 1e-3
    let cfg = TrainConfig::default();
    // With every frame a training frame, the adaptation target is the
    // training set itself.
    let target = UnlabeledFrames::from_demos(&task.train);
    match arch {
        ArchId::Dann => {
            train_dann(&mut model, task, &target, &cfg, None)?;
        }
        ArchId::Adda | ArchId::TFcnAdda => {
            train_adda(&mut model, task, &target, &cfg, None)?;
        }
        _ => {
            train(&mut model, task, &cfg, None)?;
        }
    }
    Ok(model)
}

fn training_accuracy(model: &ModelHandle, task: &PreparedTask) -> Result<f64> {
    let mut c = ConfusionCounts::default();
    for d in &task.train {
        c = c + probability_trace(model, d)?.confusion()?;
    }
    Ok(basic_metrics(c).acc)
}

fn overfit_all() -> Result<String> {
    let task = overfit_task()?;
    let mut parts = Vec::new();
    let mut failures = Vec::new();
    for arch in ArchId::ALL {
        let model = overfit_model(arch, &task)?;
        let acc = training_accuracy(&model, &task)?;
        parts.push(format!("{arch} {acc:.3}"));
        if acc < 0.95 {
            failures.push(arch.to_string());
        }
    }
    let frames: usize = task.train.iter().map(|d| d.len()).sum();
    let detail = format!("{frames} frames; {}", parts.join(", "));
    if !failures.is_empty() {
        bail!("{detail}; below 0.95: {}", failures.join(", "));
    }
    Ok(detail)
}

// ---------------------------------------------------------------- 5

fn small_task(seed: u64) -> Result<PreparedTask> {
    let cfg = SynthConfig {
        num_demos_train: 2,
        num_demos_test: 2,
        frames_per_demo: [20, 30],
        image_size: [24, 32],
        seed,
        ..SynthConfig::default()
    };
    Ok(prepare_task(&generate(&cfg)?, 16)?)
}

fn small_model(arch: ArchId, seed: u64) -> Result<ModelHandle> {
    Ok(build_model(&ModelConfig {
        arch,
        backbone: BackboneConfig {
            input_size: 16,
            channels: vec![4, 8],
            feature_dim: 8,
            ..BackboneConfig::default()
        },
        head: HeadConfig {
            hidden: 8,
            ..HeadConfig::default()
        },
        seed,
        ..ModelConfig::default()
    })?)
}

fn reductions() -> Result<String> {
    let task = small_task(51)?;
    let base = TrainConfig {
        epochs: 6,
        ..TrainConfig::default()
    };

    // w_time = 0 multitask against supervised
    let cfg = TrainConfig {
        loss_weights: LossWeights {
            time: 0.0,
            ..LossWeights::default()
        },
        ..base.clone()
    };
    let (mut fcn, mut tfcn) = (small_model(ArchId::Fcn, 1)?, small_model(ArchId::TFcn, 1)?);
    let a = train_supervised(&mut fcn, &task, &cfg, None)?;
    let b = train_multitask(&mut tfcn, &task, &cfg, None)?;
    ensure!(bits(&a.train_losses()) == bits(&b.train_losses()), "multitask loss curve differs");
    ensure!(same_params(&fcn.store, &tfcn.store, "backbone.") && same_params(&fcn.store, &tfcn.store, "cls."), "multitask parameters differ");

    // lambda = 0 DANN against supervised
    let cfg = TrainConfig {
        grl: GrlSchedule::Constant { lambda: 0.0 },
        checkpoint_selection: CheckpointSelection::Last,
        ..base.clone()
    };
    let (mut fcn, mut dann) = (small_model(ArchId::Fcn, 2)?, small_model(ArchId::Dann, 2)?);
    let a = train_supervised(&mut fcn, &task, &cfg, None)?;
    let b = train_dann(&mut dann, &task, &task.target_unlabeled(), &cfg, None)?;
    ensure!(bits(&a.component("cls")) == bits(&b.component("cls")), "DANN classification curve differs");
    ensure!(same_params(&fcn.store, &dann.store, "backbone.") && same_params(&fcn.store, &dann.store, "cls."), "DANN parameters differ");

    // zero adversarial epochs against the source model
    let cfg = TrainConfig {
        adda: AddaConfig {
            stage2_epochs: Some(0),
            ..AddaConfig::default()
        },
        ..base
    };
    let mut adda = small_model(ArchId::Adda, 3)?;
    train_adda(&mut adda, &task, &task.target_unlabeled(), &cfg, None)?;
    let mut source = adda.clone();
    source.state.use_target_encoder = false;
    for d in task.train.iter().chain(&task.test) {
        ensure!(
            bits(&adda.predict_demo(d)?.probs) == bits(&source.predict_demo(d)?.probs),
            "adapted model differs from source model on {}",
            d.demo_id
        );
    }
    Ok("multitask, DANN and ADDA reductions are bitwise".into())
}

// ---------------------------------------------------------------- 6, 7

/// Per-arch median accuracy from the shift benchmark, run once and shared.
fn shift_medians() -> Result<BTreeMap<String, f64>> {
    static CACHE: std::sync::OnceLock<std::result::Result<BTreeMap<String, f64>, String>> = std::sync::OnceLock::new();
    CACHE
        .get_or_init(|| {
            let run = || -> Result<BTreeMap<String, f64>> {
                let tmp = tempfile::tempdir()?;
                let config = repo_root().join("configs/shift_benchmark.json");
                scl(&["compare", "--config", config.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()], &[])?;
                read_csv(&tmp.path().join("comparison.csv"))?
                    .iter()
                    .map(|r| Ok((r["arch"].clone(), num(r, "acc")?)))
                    .collect()
            };
            run().map_err(|e| format!("{e:#}"))
        })
        .clone()
        .map_err(|e| anyhow::anyhow!(e))
}

fn adaptation_benefit() -> Result<String> {
    let m = shift_medians()?;
    let (fcn, dann, adda) = (m["FCN"], m["DANN"], m["ADDA"]);
    let detail = format!("median target acc FCN {fcn:.4}, DANN {dann:.4}, ADDA {adda:.4}");
    ensure!(dann >= fcn + 0.05 && adda >= fcn + 0.05, "{detail}");
    Ok(detail)
}

fn combined_ordering() -> Result<String> {
    let m = shift_medians()?;
    let (fcn, tfcn, adda, both) = (m["FCN"], m["T_FCN"], m["ADDA"], m["T_FCN_ADDA"]);
    let detail = format!("T_FCN_ADDA {both:.4}, T_FCN {tfcn:.4}, ADDA {adda:.4}, FCN {fcn:.4}");
    ensure!(both >= tfcn.max(adda) - 0.01 && both >= fcn + 0.05, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- 8

fn timing_benefit() -> Result<String> {
    let tmp = tempfile::tempdir()?;
    let config = repo_root().join("configs/timing_benchmark.json");
    scl(&["compare", "--config", config.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()], &[])?;
    let mut med = BTreeMap::new();
    for arch in ["FCN", "T_FCN"] {
        let mut vals = Vec::new();
        for seed in 0..5 {
            let path = tmp.path().join(arch).join(format!("seed_{seed}/indomain_reach/run.json"));
            let run: RunFile = serde_json::from_str(&fs::read_to_string(&path)?)?;
            vals.push(run.stages.last().and_then(|s| s.best_val_acc).context("no validation accuracy")?);
        }
        med.insert(arch, median(&vals).unwrap());
    }
    let detail = format!("median val acc T_FCN {:.4}, FCN {:.4}", med["T_FCN"], med["FCN"]);
    ensure!(med["T_FCN"] >= med["FCN"], "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- 9

fn ablation_shape() -> Result<String> {
    let tmp = tempfile::tempdir()?;
    let config = repo_root().join("configs/indomain_benchmark.json");
    scl(&["ablate", "--config", config.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()], &[])?;
    let rows = read_csv(&tmp.path().join("indomain_reach/ablation.csv"))?;
    let mut by_count: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in &rows {
        by_count.entry(r["demos"].parse()?).or_default().push(num(r, "acc")?);
    }
    ensure!(by_count.values().all(|v| v.len() == 5), "expected 5 seeds per count");
    let at = |k: usize| median(&by_count[&k]).unwrap();
    let (a1, a5, a10) = (at(1), at(5), at(10));
    let detail = format!("median acc 1 demo {a1:.4}, 5 demos {a5:.4}, 10 demos {a10:.4}");
    ensure!(a10 >= a1 && a10 - a5 <= a5 - a1, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- 10

fn sequence_contracts() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let window = 8;
    let cfg = SeqConfig {
        window,
        hidden: 8,
        attn_dim: 8,
        model_dim: 8,
        layers: 2,
        heads: 2,
        ffn_dim: 16,
    };
    let mut tstore = ParamStore::new();
    let transformer = SeqHead::new(&mut tstore, "seq", SeqKind::Transformer, 6, &cfg, &mut rng)?;
    let mut astore = ParamStore::new();
    let attention = SeqHead::new(&mut astore, "seq", SeqKind::Attention, 6, &cfg, &mut rng)?;
    let batch = |n: usize, rng: &mut ChaCha8Rng| {
        let mut pad = Array2::from_elem((n, window), false);
        for b in 0..n {
            let p = rng.random_range(0..window);
            pad.slice_mut(s![b, ..p]).fill(true);
        }
        SeqBatch {
            features: uniform(&[n, window, 6], rng).into_dimensionality::<Ix3>().unwrap(),
            pad_mask: pad,
            labels: Array2::from_shape_fn((n, window), |_| f64::from(u8::from(rng.random_bool(0.5)))),
        }
    };

    let mut causal = 0;
    for _ in 0..100 {
        let a = batch(1, &mut rng);
        let cut = rng.random_range(0..window - 1);
        let mut b = a.clone();
        let noise = uniform(&[window - cut - 1, 6], &mut rng) * 5.0;
        let mut tail = b.features.slice_mut(s![0, cut + 1.., ..]);
        tail += &noise.into_dimensionality::<ndarray::Ix2>().unwrap();
        let pa = transformer.probabilities(&tstore, &a, DecodeMode::Autoregressive)?;
        let pb = transformer.probabilities(&tstore, &b, DecodeMode::Autoregressive)?;
        causal += usize::from((0..=cut).all(|t| pa[[0, t]].to_bits() == pb[[0, t]].to_bits()));
    }
    ensure!(causal == 100, "causality held in {causal}/100 trials");

    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let b = batch(100, &mut rng);
        for (store, head) in [(&tstore, &transformer), (&astore, &attention)] {
            let mut tape = Tape::new();
            let out = head.forward(&mut tape, store, &b, DecodeMode::Autoregressive)?;
            for w in &out.attention {
                let w = tape.value(*w);
                ensure!(w.iter().all(|&v| v >= 0.0), "negative attention weight");
                for row in w.lanes(ndarray::Axis(w.ndim() - 1)) {
                    worst = worst.max((row.sum() - 1.0).abs());
                }
            }
        }
    }
    ensure!(worst <= 1e-6, "attention rows deviate from 1 by {worst:.1e}");

    let task = overfit_task()?;
    let model = overfit_model(ArchId::AttnRnn, &task)?;
    let seq = model.seq.as_ref().unwrap();
    let demo = &task.train[0];
    let imgs: Vec<_> = demo.images.iter().map(|a| a.as_ref()).collect();
    let feats = model.features(&imgs)?;
    let windows = make_windows(&demo.labels, model.config.seq.window)?;
    let refs: Vec<_> = windows.iter().collect();
    let b = SeqBatch::from_windows(&feats, &refs);
    let tf = seq.probabilities(&model.store, &b, DecodeMode::TeacherForcing)?;
    let ar = seq.probabilities(&model.store, &b, DecodeMode::Autoregressive)?;
    let agree = tf.iter().zip(ar.iter()).filter(|(a, b)| (**a >= 0.5) == (**b >= 0.5)).count();
    let agreement = agree as f64 / tf.len() as f64;
    ensure!(agreement >= 0.95, "teacher-forcing/autoregressive agreement {agreement:.4}");
    Ok(format!(
        "causality 100/100, 1000 windows max |sum-1| {worst:.1e}, TF/AR agreement {agreement:.4}"
    ))
}

// ---------------------------------------------------------------- 11

fn checksums(ds: &TaskDataset) -> Vec<String> {
    ds.train_demos
        .iter()
        .chain(&ds.test_demos)
        .flat_map(|d| {
            d.frames.iter().map(|f| {
                let digest = Sha256::digest(f.pixels.as_slice().unwrap());
                digest.iter().map(|b| format!("{b:02x}")).collect::<String>()
            })
        })
        .collect()
}

fn ingestion() -> Result<String> {
    let tmp = tempfile::tempdir()?;
    let mut parts = Vec::new();
    for (name, fx) in ingestion_fixtures() {
        let raw = tmp.path().join(&name).join("raw");
        let out = tmp.path().join(&name).join("task");
        write_raw_layout(&fx, &raw)?;
        match fx.layout {
            Layout::Kitchen => convert_kitchen(&raw, &out, &name, 10.0)?,
            Layout::Mime => convert_mime(&raw, &out, &name, 10.0)?,
        };
        let c = load_manifest(&out)?.counts();
        let d = fx.declared;
        let got = (c.train_non_success, c.train_success, c.test_non_success, c.test_success);
        let want = (d.train_non_success, d.train_success, d.test_non_success, d.test_success);
        ensure!(got == want, "{name}: counts {got:?}, declared {want:?}");
        parts.push(format!("{name} {}/{}", d.train_non_success, d.train_success));
    }
    let cfg = SynthConfig {
        num_demos_train: 3,
        num_demos_test: 2,
        frames_per_demo: [10, 20],
        image_size: [24, 32],
        seed: 11,
        ..SynthConfig::default()
    };
    let dir = tmp.path().join("synth");
    let (generated, _) = generate_to_dir(&cfg, &dir)?;
    let loaded = load_manifest(&dir)?;
    let (a, b) = (checksums(&generated), checksums(&loaded));
    ensure!(a == b, "synth round trip changed frame checksums");
    parts.push(format!("round trip of {} frames", a.len()));
    Ok(parts.join(", "))
}

// ---------------------------------------------------------------- 12

fn end_to_end() -> Result<String> {
    let tmp = tempfile::tempdir()?;
    let root = tmp.path();
    let cache = root.join("cache");
    let env = [("SCL_CACHE_DIR", cache.as_path())];
    let p = |name: &str| root.join(name).to_str().unwrap().to_string();
    scl(&["synth", "--out", &p("data")], &env)?;
    scl(&["train", "--out", &p("train")], &env)?;
    scl(&["eval", "--out", &p("train")], &env)?;
    scl(&["compare", "--archs", "FCN,T_FCN", "--out", &p("compare")], &env)?;

    let task = SynthConfig::default().task_id;
    let manifest = root.join("data").join(&task);
    let ds = load_manifest(&manifest)?;
    ensure!(!ds.test_demos.is_empty(), "synth wrote no test demos");

    // metrics.json parses as a report and holds valid rates
    let text = fs::read_to_string(root.join("train/metrics.json"))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    for key in ["arch", "per_task", "macro", "train_time_per_image_s"] {
        ensure!(value.get(key).is_some(), "metrics.json lacks `{key}`");
    }
    let report: MetricsReport = serde_json::from_str(&text)?;
    let m = report.per_task.get(&task).context("task missing from metrics.json")?;
    for v in [m.acc, m.precision, m.recall, m.f1, m.auc, m.tpr, m.tnr] {
        ensure!((0.0..=1.0).contains(&v), "rate {v} out of range");
    }
    ensure!(m.test_time_per_image_s > 0.0 && report.train_time_per_image_s > 0.0, "timings missing");

    for d in &ds.test_demos {
        let csv = root.join("train").join(&task).join(format!("traces/trace_{}.csv", d.demo_id));
        let rows = read_csv(&csv)?;
        ensure!(rows.len() == d.len(), "trace of {} has {} rows", d.demo_id, rows.len());
    }

    let table = read_csv(&root.join("compare/comparison.csv"))?;
    let archs: Vec<&str> = table.iter().map(|r| r["arch"].as_str()).collect();
    ensure!(archs == ["FCN", "T_FCN"], "comparison rows {archs:?}");
    ensure!(table.iter().all(|r| r["status"] == "ok"), "a comparison row failed");
    ensure!(fs::read_to_string(root.join("compare/comparison.md"))?.contains("| T_FCN |"), "markdown table incomplete");

    // compare reran FCN with the same seed and config
    let first = fs::read(root.join("train").join(&task).join("curves.csv"))?;
    let again = fs::read(root.join("compare/FCN/seed_0").join(&task).join("curves.csv"))?;
    ensure!(first == again, "rerun curves differ");
    Ok(format!(
        "FCN acc {:.4}, {} traces, rows {archs:?}, rerun curves bitwise equal",
        m.acc,
        ds.test_demos.len()
    ))
}
