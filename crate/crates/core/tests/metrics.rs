use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scl_core::backbones::BackboneConfig;
use scl_core::dataset::prepare_task;
use scl_core::evaluation::{
    auc, basic_metrics, confusion, evaluate_task, median, pearson, time_per_image, ConfusionCounts, EvalOptions,
    MetricsReport, TaskMetrics, TimingMode,
};
use scl_core::models::{build_model, ArchId, ModelConfig};
use scl_core::synthgen::{generate, SynthConfig};
use scl_core::SclError;

fn random_case(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    let n = rng.random_range(1..60);
    // A coarse grid makes ties and exact threshold hits common.
    let probs = (0..n).map(|_| f64::from(rng.random_range(0..=20u8)) / 20.0).collect();
    let labels = (0..n).map(|_| u8::from(rng.random_bool(0.4))).collect();
    (probs, labels)
}

fn brute_confusion(probs: &[f64], labels: &[u8]) -> [usize; 4] {
    let mut c = [0; 4];
    for i in 0..probs.len() {
        let pred = if probs[i] >= 0.5 { 1 } else { 0 };
        let y = labels[i];
        if pred == 1 && y == 1 {
            c[0] += 1;
        }
        if pred == 0 && y == 0 {
            c[1] += 1;
        }
        if pred == 1 && y == 0 {
            c[2] += 1;
        }
        if pred == 0 && y == 1 {
            c[3] += 1;
        }
    }
    c
}

fn div_or_zero(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

#[test]
fn confusion_and_rates_match_brute_force_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..1000 {
        let (probs, labels) = random_case(&mut rng);
        let c = confusion(&probs, &labels, 0.5).unwrap();
        let [tp, tn, fp, fn_] = brute_confusion(&probs, &labels);
        assert_eq!((c.tp, c.tn, c.fp, c.fn_), (tp, tn, fp, fn_));

        let m = basic_metrics(c);
        let (tp, tn, fp, fn_) = (tp as f64, tn as f64, fp as f64, fn_ as f64);
        let correct = probs.iter().zip(&labels).filter(|(p, y)| u8::from(**p >= 0.5) == **y).count();
        assert_eq!(m.acc, correct as f64 / probs.len() as f64);
        let precision = div_or_zero(tp, tp + fp);
        let recall = div_or_zero(tp, tp + fn_);
        assert_eq!(m.precision, precision);
        assert_eq!(m.recall, recall);
        assert_eq!(m.tpr, recall);
        assert_eq!(m.tnr, div_or_zero(tn, tn + fp));
        assert_eq!(m.f1, div_or_zero(2.0 * precision * recall, precision + recall));
    }
}

#[test]
fn metric_identities_on_random_tables() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for i in 0..1000 {
        // Every fourth table zeroes a cell to reach the 0/0 conventions.
        let mut cells = [0usize; 4];
        for c in &mut cells {
            *c = rng.random_range(0..50);
        }
        if i % 4 == 0 {
            cells[rng.random_range(0..4)] = 0;
            cells[rng.random_range(0..4)] = 0;
        }
        let [tp, tn, fp, fn_] = cells;
        if tp + tn + fp + fn_ == 0 {
            continue;
        }
        let m = basic_metrics(ConfusionCounts { tp, tn, fp, fn_ });
        let (tp, tn, fp, fn_) = (tp as f64, tn as f64, fp as f64, fn_ as f64);
        assert_eq!(m.acc, (tp + tn) / (tp + tn + fp + fn_));
        let p = div_or_zero(tp, tp + fp);
        let r = div_or_zero(tp, tp + fn_);
        assert_eq!((m.precision, m.recall), (p, r));
        assert_eq!(m.f1, div_or_zero(2.0 * p * r, p + r));
        assert_eq!(m.tnr, div_or_zero(tn, tn + fp));
    }
}

#[test]
fn metric_examples() {
    let perfect = basic_metrics(ConfusionCounts { tp: 1, tn: 1, fp: 0, fn_: 0 });
    assert_eq!((perfect.acc, perfect.f1, perfect.tnr), (1.0, 1.0, 1.0));
    let none = basic_metrics(ConfusionCounts { tp: 0, tn: 5, fp: 0, fn_: 3 });
    assert_eq!((none.precision, none.f1), (0.0, 0.0));
    let table = basic_metrics(ConfusionCounts {
        tp: 911,
        fn_: 89,
        tn: 975,
        fp: 25,
    });
    assert_eq!(table.tpr, 0.911);
    assert_eq!(table.tnr, 0.975);
    assert!(matches!(confusion(&[0.5], &[1, 0], 0.5), Err(SclError::Shape { .. })));
    assert!(matches!(confusion(&[], &[], 0.5), Err(SclError::InsufficientData(_))));
}

fn pairwise_auc(probs: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for i in 0..probs.len() {
        for j in 0..probs.len() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if probs[i] > probs[j] {
                    num += 1.0;
                } else if probs[i] == probs[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / pairs
}

#[test]
fn auc_matches_pairwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut checked = 0;
    while checked < 200 {
        let (mut probs, labels) = random_case(&mut rng);
        if checked % 2 == 1 {
            probs.iter_mut().for_each(|p| *p = rng.random());
        }
        if !labels.contains(&0) || !labels.contains(&1) {
            continue;
        }
        let got = auc(&probs, &labels).unwrap();
        assert!((got - pairwise_auc(&probs, &labels)).abs() <= 1e-12);
        checked += 1;
    }
}

#[test]
fn auc_examples() {
    assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
    assert_eq!(auc(&[0.3; 6], &[0, 1, 1, 0, 1, 0]).unwrap(), 0.5);
    assert!(matches!(auc(&[0.1, 0.9], &[1, 1]), Err(SclError::UndefinedMetric(_))));
}

proptest! {
    #[test]
    fn auc_invariant_under_increasing_maps(
        case in prop::collection::vec((0u8..30, any::<bool>()), 2..80)
    ) {
        let probs: Vec<f64> = case.iter().map(|(p, _)| f64::from(*p) / 30.0).collect();
        let labels: Vec<u8> = case.iter().map(|(_, y)| u8::from(*y)).collect();
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let base = auc(&probs, &labels).unwrap();
        for m in [|x: f64| x.powi(3), |x: f64| 2.0 * x - 7.0, |x: f64| x.exp()] {
            let mapped: Vec<f64> = probs.iter().map(|&p| m(p)).collect();
            prop_assert_eq!(auc(&mapped, &labels).unwrap(), base);
        }
    }

    #[test]
    fn auc_complement_symmetry(
        case in prop::collection::vec((0u8..30, any::<bool>()), 2..80)
    ) {
        let probs: Vec<f64> = case.iter().map(|(p, _)| f64::from(*p) / 30.0).collect();
        let labels: Vec<u8> = case.iter().map(|(_, y)| u8::from(*y)).collect();
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let flipped: Vec<u8> = labels.iter().map(|y| 1 - y).collect();
        let total = auc(&probs, &labels).unwrap() + auc(&probs, &flipped).unwrap();
        prop_assert!((total - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn accuracy_is_symmetric_under_label_and_score_flip(
        case in prop::collection::vec((0u8..=20, any::<bool>()), 1..60)
    ) {
        // Flipping 0.5 itself would change the tie side, so it is excluded.
        let probs: Vec<f64> = case.iter().map(|(p, _)| f64::from(*p) / 20.0).filter(|&p| p != 0.5).collect();
        let labels: Vec<u8> = case.iter().filter(|(p, _)| *p != 10).map(|(_, y)| u8::from(*y)).collect();
        prop_assume!(!probs.is_empty());
        let a = basic_metrics(confusion(&probs, &labels, 0.5).unwrap());
        let fp: Vec<f64> = probs.iter().map(|p| 1.0 - p).collect();
        let fl: Vec<u8> = labels.iter().map(|y| 1 - y).collect();
        let b = basic_metrics(confusion(&fp, &fl, 0.5).unwrap());
        prop_assert_eq!(a.acc, b.acc);
        prop_assert_eq!(a.tpr, b.tnr);
    }
}

fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    let sx = (x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n).sqrt();
    let sy = (y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / n).sqrt();
    cov / (sx * sy)
}

#[test]
fn pearson_matches_formula_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..200 {
        let x: Vec<f64> = (0..20).map(|_| rng.random()).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.3 * v + rng.random::<f64>()).collect();
        assert!((pearson(&x, &y).unwrap() - pearson_oracle(&x, &y)).abs() <= 1e-12);
    }
    let x = [0.1, 0.4, 0.35, 0.9];
    assert!((pearson(&x, &x).unwrap() - 1.0).abs() <= 1e-12);
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    assert!((pearson(&x, &neg).unwrap() + 1.0).abs() <= 1e-12);
    assert!(matches!(pearson(&x, &[1.0; 4]), Err(SclError::UndefinedMetric(_))));
    assert!(pearson(&[1.0], &[2.0]).is_err());
}

fn task_metrics(rng: &mut ChaCha8Rng) -> TaskMetrics {
    TaskMetrics {
        acc: rng.random(),
        precision: rng.random(),
        recall: rng.random(),
        f1: rng.random(),
        auc: rng.random(),
        tpr: rng.random(),
        tnr: rng.random(),
        test_time_per_image_s: rng.random::<f64>() * 0.01,
    }
}

#[test]
fn macro_average_is_mean_of_tasks() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let per_task: BTreeMap<String, TaskMetrics> = (0..7).map(|i| (format!("t{i}"), task_metrics(&mut rng))).collect();
    let report = MetricsReport::new(ArchId::Fcn, per_task.clone(), 0.0).unwrap();
    let mean = |f: fn(&TaskMetrics) -> f64| per_task.values().map(f).sum::<f64>() / 7.0;
    assert!((report.macro_avg.acc - mean(|m| m.acc)).abs() <= 1e-12);
    assert!((report.macro_avg.f1 - mean(|m| m.f1)).abs() <= 1e-12);
    assert!((report.macro_avg.auc - mean(|m| m.auc)).abs() <= 1e-12);
    assert!((report.macro_avg.tnr - mean(|m| m.tnr)).abs() <= 1e-12);
    assert!((report.macro_avg.test_time_per_image_s - mean(|m| m.test_time_per_image_s)).abs() <= 1e-12);
    let corr = report.correlations();
    let col = |f: fn(&TaskMetrics) -> f64| per_task.values().map(f).collect::<Vec<_>>();
    assert!((corr["acc_auc"] - pearson_oracle(&col(|m| m.acc), &col(|m| m.auc))).abs() <= 1e-12);
    assert!(MetricsReport::new(ArchId::Fcn, BTreeMap::new(), 0.0).is_err());
}

fn tiny_setup() -> (scl_core::models::ModelHandle, scl_core::dataset::PreparedTask) {
    let synth = SynthConfig {
        num_demos_train: 1,
        num_demos_test: 3,
        frames_per_demo: [40, 50],
        image_size: [24, 32],
        seed: 26,
        ..SynthConfig::default()
    };
    let task = prepare_task(&generate(&synth).unwrap(), 16).unwrap();
    let model = build_model(&ModelConfig {
        arch: ArchId::Fcn,
        backbone: BackboneConfig {
            input_size: 16,
            channels: vec![4, 8],
            feature_dim: 8,
            ..BackboneConfig::default()
        },
        seed: 26,
        ..ModelConfig::default()
    })
    .unwrap();
    (model, task)
}

#[test]
fn traces_agree_with_pipeline_counts() {
    let (model, task) = tiny_setup();
    let opts = EvalOptions {
        measure_time: false,
        timing_reps: 3,
    };
    let (metrics, traces) = evaluate_task(&model, &task, &opts).unwrap();
    assert_eq!(traces.len(), task.test.len());
    let mut pooled = ConfusionCounts::default();
    for (trace, demo) in traces.iter().zip(&task.test) {
        assert_eq!(trace.probs.len(), demo.len());
        assert_eq!(trace.labels, demo.labels);
        let pred = model.predict_demo(demo).unwrap();
        let direct = confusion(&pred.probs, &demo.labels, 0.5).unwrap();
        assert_eq!(trace.confusion().unwrap(), direct);
        pooled = pooled + direct;
        let csv = trace.to_csv();
        assert_eq!(csv.lines().count(), demo.len() + 1);
        assert!(csv.starts_with("frame,prob,label\n"));
    }
    let m = basic_metrics(pooled);
    assert_eq!((metrics.acc, metrics.f1, metrics.tnr), (m.acc, m.f1, m.tnr));
    assert_eq!(metrics.test_time_per_image_s, 0.0);
}

#[test]
fn per_image_time_is_stable_and_linear() {
    let (model, task) = tiny_setup();
    let frames: usize = task.test.iter().map(|d| d.len()).sum();
    assert!(frames >= 100);
    let doubled: Vec<_> = task.test.iter().chain(&task.test).cloned().collect();
    let measure = |demos: &[scl_core::dataset::PreparedDemo]| {
        let runs: Vec<f64> = (0..5).map(|_| time_per_image(&model, demos, TimingMode::Test, 3).unwrap()).collect();
        median(&runs).unwrap()
    };
    let a = measure(&task.test);
    let b = measure(&task.test);
    let c = measure(&doubled);
    assert!(a > 0.0 && b > 0.0);
    assert!((a - b).abs() <= 0.5 * a.max(b), "repeat {a} vs {b}");
    assert!((c / a - 1.0).abs() <= 0.3, "doubled workload per-image {c} vs {a}");
    let train = time_per_image(&model, &task.test, TimingMode::Train, 3).unwrap();
    assert!(train > 0.0);
}
