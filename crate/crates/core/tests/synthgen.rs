use scl_core::dataset::{prepare_task, Demonstration, PreparedDemo, PreparedTask};
use scl_core::evaluation::probability_trace;
use scl_core::backbones::BackboneConfig;
use scl_core::models::{build_model, ArchId, ModelConfig};
use scl_core::synthgen::{generate, oracle_predict, ShiftSpec, SynthConfig, TaskRule};
use scl_core::training::{train, TrainConfig};

const RULES: [TaskRule; 3] = [TaskRule::ReachTarget, TaskRule::StackBlocks, TaskRule::CoverRegion];

fn config(rule: TaskRule, seed: u64) -> SynthConfig {
    SynthConfig {
        num_demos_train: 6,
        num_demos_test: 6,
        frames_per_demo: [30, 60],
        image_size: [40, 48],
        task_rule: rule,
        seed,
        ..SynthConfig::default()
    }
}

fn all_demos(cfg: &SynthConfig) -> Vec<Demonstration> {
    let ds = generate(cfg).unwrap();
    ds.train_demos.into_iter().chain(ds.test_demos).collect()
}

#[test]
fn oracle_agrees_with_every_label() {
    for rule in RULES {
        for seed in 0..3 {
            for d in all_demos(&config(rule, seed)) {
                for (f, &l) in d.frames.iter().zip(&d.labels) {
                    assert_eq!(oracle_predict(f, rule).unwrap(), l, "{rule:?} {} step {}", d.demo_id, f.step_index);
                }
            }
        }
    }
}

#[test]
fn success_tail_tracks_configuration() {
    for rule in RULES {
        for tail in [0.2, 0.3] {
            let cfg = SynthConfig {
                success_tail_fraction: tail,
                ..config(rule, 5)
            };
            for d in all_demos(&cfg) {
                let frac = d.count_success() as f64 / d.len() as f64;
                assert!((frac - tail).abs() <= 0.1, "{rule:?} {}: {frac} vs {tail}", d.demo_id);
            }
        }
    }
}

/// Normalized 4-bins-per-channel color histogram.
fn histogram(d: &Demonstration, i: usize) -> Vec<f64> {
    let px = &d.frames[i].pixels;
    let mut h = vec![0.0; 64];
    let (hh, ww, _) = px.dim();
    for y in 0..hh {
        for x in 0..ww {
            let bin = |c: usize| usize::from(px[[y, x, c]] / 64);
            h[bin(0) * 16 + bin(1) * 4 + bin(2)] += 1.0;
        }
    }
    let n = (hh * ww) as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}

/// Nearest-centroid domain classifier on color histograms, fit on even
/// demos and scored on odd ones.
fn histogram_domain_accuracy(cfg: &SynthConfig) -> f64 {
    let ds = generate(cfg).unwrap();
    let split = |demos: &[Demonstration], parity: usize| -> Vec<Vec<f64>> {
        demos
            .iter()
            .enumerate()
            .filter(|(i, _)| i % 2 == parity)
            .flat_map(|(_, d)| (0..d.len()).map(move |i| histogram(d, i)))
            .collect()
    };
    let centroid = |rows: &[Vec<f64>]| -> Vec<f64> {
        let mut c = vec![0.0; 64];
        for r in rows {
            c.iter_mut().zip(r).for_each(|(a, b)| *a += b / rows.len() as f64);
        }
        c
    };
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let (cs, ct) = (centroid(&split(&ds.train_demos, 0)), centroid(&split(&ds.test_demos, 0)));
    let (mut right, mut total) = (0, 0);
    for (rows, is_target) in [(split(&ds.train_demos, 1), false), (split(&ds.test_demos, 1), true)] {
        for r in rows {
            right += usize::from((dist(&r, &ct) < dist(&r, &cs)) == is_target);
            total += 1;
        }
    }
    right as f64 / total as f64
}

#[test]
fn shifted_domains_are_separable_by_color_histograms() {
    for rule in RULES {
        let acc = histogram_domain_accuracy(&config(rule, 2));
        assert!(acc >= 0.95, "{rule:?}: histogram domain accuracy {acc}");
    }
    let flat = SynthConfig {
        shift_spec: ShiftSpec::disabled(),
        ..config(TaskRule::ReachTarget, 2)
    };
    let acc = histogram_domain_accuracy(&flat);
    assert!(acc < 0.8, "identical palettes should not separate: {acc}");
}

/// Per-demo accuracies of a small FCN trained on `task`'s training split,
/// on each of the given demo sets.
fn probe_accuracies(task: &PreparedTask, sets: &[&[PreparedDemo]]) -> Vec<Vec<f64>> {
    let mc = ModelConfig {
        arch: ArchId::Fcn,
        backbone: BackboneConfig {
            input_size: 32,
            channels: vec![8, 16, 32],
            feature_dim: 32,
            ..BackboneConfig::default()
        },
        ..ModelConfig::default()
    };
    let mut model = build_model(&mc).unwrap();
    let tc = TrainConfig {
        epochs: 25,
        ..TrainConfig::default()
    };
    train(&mut model, task, &tc, None).unwrap();
    sets.iter()
        .map(|demos| {
            demos
                .iter()
                .map(|d| {
                    let t = probability_trace(&model, d).unwrap();
                    let right = t.probs.iter().zip(&t.labels).filter(|(p, l)| u8::from(**p >= 0.5) == **l).count();
                    right as f64 / d.len() as f64
                })
                .collect()
        })
        .collect()
}

fn mean_and_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0))
}

#[test]
fn without_shift_source_and_target_accuracy_match() {
    let base = SynthConfig {
        num_demos_train: 6,
        num_demos_test: 10,
        frames_per_demo: [30, 40],
        image_size: [48, 64],
        success_tail_fraction: 0.3,
        shift_spec: ShiftSpec::disabled(),
        seed: 13,
        ..SynthConfig::default()
    };
    let task = prepare_task(&generate(&base).unwrap(), 32).unwrap();
    // Fresh source-domain demonstrations serve as the held-out source set.
    let held = SynthConfig {
        num_demos_train: 10,
        seed: 14,
        ..base.clone()
    };
    let held = prepare_task(&generate(&held).unwrap(), 32).unwrap();
    let accs = probe_accuracies(&task, &[&held.train, &task.test]);
    let ((ms, vs), (mt, vt)) = (mean_and_var(&accs[0]), mean_and_var(&accs[1]));
    // Standard error over demonstrations: frames within a demo are correlated.
    let se = (vs / accs[0].len() as f64 + vt / accs[1].len() as f64).sqrt();
    println!("probe: source {ms:.4} target {mt:.4} (3 se = {:.4})", 3.0 * se);
    assert!((ms - mt).abs() <= 3.0 * se, "source {ms} target {mt} se {se}");
}
