use scl_autograd::ParamStore;
use scl_core::backbones::BackboneConfig;
use scl_core::dataset::{prepare_task, PreparedTask, UnlabeledFrames};
use scl_core::models::{build_model, ArchId, HeadConfig, ModelConfig, ModelHandle};
use scl_core::synthgen::{generate, ShiftSpec, SynthConfig};
use scl_core::training::{
    train, train_adda, train_dann, train_multitask, train_supervised, AddaConfig, CheckpointSelection, GrlSchedule,
    LossWeights, RunRecord, TrainConfig,
};
use scl_core::SclError;

fn task(train_demos: usize, frames: [usize; 2], seed: u64) -> PreparedTask {
    let cfg = SynthConfig {
        num_demos_train: train_demos,
        num_demos_test: 2,
        frames_per_demo: frames,
        image_size: [24, 32],
        seed,
        ..SynthConfig::default()
    };
    prepare_task(&generate(&cfg).unwrap(), 16).unwrap()
}

fn model(arch: ArchId, seed: u64) -> ModelHandle {
    build_model(&ModelConfig {
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
    })
    .unwrap()
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        ..TrainConfig::default()
    }
}

/// Bitwise comparison of every parameter under `prefix`.
fn same_params(a: &ParamStore, b: &ParamStore, prefix: &str) -> bool {
    let ids: Vec<_> = a.ids_with_prefix(prefix).collect();
    assert!(!ids.is_empty(), "no parameters under {prefix}");
    ids.into_iter().all(|id| {
        let other = b.id(a.name(id)).expect("same layout");
        a.get(id).iter().zip(b.get(other).iter()).all(|(x, y)| x.to_bits() == y.to_bits())
    })
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn val_accs(r: &RunRecord) -> Vec<Option<u64>> {
    r.epochs.iter().map(|e| e.val_acc.map(f64::to_bits)).collect()
}

#[test]
fn zero_timing_weight_reduces_to_supervised() {
    let t = task(2, [20, 30], 31);
    let mut c = cfg(6);
    c.loss_weights = LossWeights {
        time: 0.0,
        ..LossWeights::default()
    };
    let mut fcn = model(ArchId::Fcn, 3);
    let mut tfcn = model(ArchId::TFcn, 3);
    let a = train_supervised(&mut fcn, &t, &c, None).unwrap();
    let b = train_multitask(&mut tfcn, &t, &c, None).unwrap();
    assert_eq!(bits(&a.train_losses()), bits(&b.train_losses()));
    assert_eq!(val_accs(&a), val_accs(&b));
    assert!(same_params(&fcn.store, &tfcn.store, "backbone."));
    assert!(same_params(&fcn.store, &tfcn.store, "cls."));
}

#[test]
fn zero_lambda_dann_reduces_to_supervised() {
    let t = task(2, [20, 30], 32);
    let mut c = cfg(6);
    c.grl = GrlSchedule::Constant { lambda: 0.0 };
    c.checkpoint_selection = CheckpointSelection::Last;
    let mut fcn = model(ArchId::Fcn, 4);
    let mut dann = model(ArchId::Dann, 4);
    let a = train_supervised(&mut fcn, &t, &c, None).unwrap();
    let b = train_dann(&mut dann, &t, &t.target_unlabeled(), &c, None).unwrap();
    assert_eq!(bits(&a.component("cls")), bits(&b.component("cls")));
    assert_eq!(val_accs(&a), val_accs(&b));
    assert!(same_params(&fcn.store, &dann.store, "backbone."));
    assert!(same_params(&fcn.store, &dann.store, "cls."));
    for demo in &t.test {
        assert_eq!(bits(&fcn.predict_demo(demo).unwrap().probs), bits(&dann.predict_demo(demo).unwrap().probs));
    }
}

#[test]
fn zero_stage_two_adda_equals_source_model() {
    let t = task(2, [20, 30], 33);
    let mut c = cfg(5);
    c.adda = AddaConfig {
        stage2_epochs: Some(0),
        ..AddaConfig::default()
    };
    let mut adda = model(ArchId::Adda, 5);
    let (source, adapted) = train_adda(&mut adda, &t, &t.target_unlabeled(), &c, None).unwrap();
    assert!(adapted.epochs.is_empty());
    assert_eq!(source.epochs.len(), 5);
    assert!(adda.state.use_target_encoder);
    let mut source_only = adda.clone();
    source_only.state.use_target_encoder = false;
    for demo in t.test.iter().chain(&t.train) {
        let p = adda.predict_demo(demo).unwrap().probs;
        assert_eq!(bits(&p), bits(&source_only.predict_demo(demo).unwrap().probs));
    }

    // The source stage is ordinary supervised training.
    let mut fcn = model(ArchId::Fcn, 5);
    let mut sup_cfg = c.clone();
    sup_cfg.checkpoint_selection = CheckpointSelection::BestVal;
    let s = train_supervised(&mut fcn, &t, &sup_cfg, None).unwrap();
    assert_eq!(bits(&s.train_losses()), bits(&source.train_losses()));
    assert!(same_params(&fcn.store, &adda.store, "backbone."));
}

#[test]
fn fixed_seed_reproduces_curves_and_parameters() {
    let t = task(2, [20, 30], 34);
    for arch in [ArchId::Fcn, ArchId::TFcn, ArchId::Dann, ArchId::Adda] {
        let run = |seed: u64| {
            let mut m = model(arch, seed);
            let mut c = cfg(3);
            c.seed = seed;
            let recs = train(&mut m, &t, &c, None).unwrap();
            (m, recs.iter().map(|r| r.curves_csv()).collect::<Vec<_>>())
        };
        let (m1, c1) = run(7);
        let (m2, c2) = run(7);
        assert_eq!(c1, c2, "{arch}");
        assert!(same_params(&m1.store, &m2.store, ""), "{arch}");
        let (_, c3) = run(8);
        assert_ne!(c1, c3, "{arch}");
    }
}

#[test]
fn zero_epochs_keeps_initial_parameters() {
    let t = task(1, [20, 30], 35);
    let mut m = model(ArchId::Fcn, 6);
    let init = m.store.clone();
    let dir = tempfile::tempdir().unwrap();
    let rec = train_supervised(&mut m, &t, &cfg(0), Some(dir.path())).unwrap();
    assert!(rec.epochs.is_empty());
    assert_eq!(rec.best_epoch, None);
    assert!(same_params(&init, &m.store, ""));
    // Checkpoints store single precision.
    let saved = ModelHandle::load(&dir.path().join("checkpoint")).unwrap();
    for id in init.ids() {
        let back = saved.store.get(saved.store.id(init.name(id)).unwrap());
        assert!(init.get(id).iter().zip(back).all(|(a, b)| f64::from(*a as f32) == *b));
    }
    assert_eq!(rec.curves_csv(), "epoch,train_loss,val_loss,train_acc,val_acc\n");
}

#[test]
fn divergence_aborts_with_position() {
    let t = task(2, [20, 30], 36);
    let mut m = model(ArchId::Fcn, 7);
    let mut c = cfg(3);
    c.learning_rate = 1e300;
    match train(&mut m, &t, &c, None) {
        Err(SclError::NumericalFailure { epoch, batch, detail }) => {
            assert_eq!(epoch, 0);
            assert!(batch >= 1, "the first batch runs on finite initial weights");
            assert!(!detail.is_empty());
        }
        other => panic!("expected a numerical failure, got {:?}", other.map(|r| r.len())),
    }
}

#[test]
fn total_loss_is_weighted_sum_of_components() {
    let t = task(2, [20, 30], 37);
    let mut c = cfg(4);
    c.loss_weights = LossWeights {
        cls: 0.7,
        time: 2.5,
        dom: 0.4,
    };
    let mut tfcn = model(ArchId::TFcn, 8);
    let r = train_multitask(&mut tfcn, &t, &c, None).unwrap();
    for e in &r.epochs {
        let expected = 0.7 * e.components["cls"] + 2.5 * e.components["time"];
        assert!((e.train_loss - expected).abs() <= 1e-6);
    }
    let mut dann = model(ArchId::Dann, 8);
    let r = train_dann(&mut dann, &t, &t.target_unlabeled(), &c, None).unwrap();
    for e in &r.epochs {
        let expected = 0.7 * e.components["cls"] + 0.4 * e.components["dom"];
        assert!((e.train_loss - expected).abs() <= 1e-6);
        assert!(e.diagnostics.contains_key("dom_acc"));
    }
}

#[test]
fn single_batch_loss_decreases_monotonically() {
    // 20 frames with a 0.8 split leave exactly one batch of 16.
    let t = task(1, [20, 20], 38);
    let mut m = build_model(&ModelConfig {
        arch: ArchId::Fcn,
        backbone: BackboneConfig {
            input_size: 16,
            channels: vec![8, 16],
            feature_dim: 16,
            ..BackboneConfig::default()
        },
        seed: 9,
        ..ModelConfig::default()
    })
    .unwrap();
    let mut c = cfg(300);
    c.checkpoint_selection = CheckpointSelection::Last;
    let r = train_supervised(&mut m, &t, &c, None).unwrap();
    let losses = r.train_losses();
    // Three-epoch moving average damps Adam's small oscillations.
    let smooth: Vec<f64> = losses.windows(3).map(|w| w.iter().sum::<f64>() / 3.0).collect();
    let tail = &smooth[5..];
    let steps = tail.len() - 1;
    let non_increasing = tail.windows(2).filter(|w| w[1] <= w[0]).count();
    println!(
        "non-increasing {non_increasing}/{steps}, final loss {:.5}",
        losses.last().unwrap()
    );
    assert!(non_increasing as f64 >= 0.9 * steps as f64);
    assert!(*losses.last().unwrap() < 0.05);
    assert!(losses.iter().all(|&l| l > 0.0));
}

#[test]
fn identical_domains_leave_discriminator_at_chance() {
    let t = task(2, [20, 30], 39);
    // The target set is the training frames themselves.
    let same = UnlabeledFrames::from_demos(&t.train);
    let mut c = cfg(20);
    c.adda.stage2_epochs = Some(20);
    let mut dann = model(ArchId::Dann, 10);
    let r = train_dann(&mut dann, &t, &same, &c, None).unwrap();
    let acc = r.final_domain_accuracy.unwrap();
    println!("DANN domain accuracy {acc:.4}");
    assert!((0.45..=0.55).contains(&acc));

    let mut adda = model(ArchId::Adda, 10);
    let (_, r) = train_adda(&mut adda, &t, &same, &c, None).unwrap();
    let acc = r.final_domain_accuracy.unwrap();
    println!("ADDA domain accuracy {acc:.4}");
    assert!((0.45..=0.55).contains(&acc));
}

#[test]
fn adaptation_needs_target_frames() {
    let t = task(2, [20, 30], 40);
    let empty = UnlabeledFrames::default();
    let c = cfg(1);
    let err = train_dann(&mut model(ArchId::Dann, 0), &t, &empty, &c, None).unwrap_err();
    assert!(matches!(err, SclError::InsufficientData(ref m) if m.contains("unlabeled target")));
    let err = train_adda(&mut model(ArchId::Adda, 0), &t, &empty, &c, None).unwrap_err();
    assert!(matches!(err, SclError::InsufficientData(_)));
    let err = train_dann(&mut model(ArchId::Fcn, 0), &t, &t.target_unlabeled(), &c, None).unwrap_err();
    assert!(matches!(err, SclError::Capability { .. }));
}

#[test]
fn shifted_target_is_what_adaptation_sees() {
    let cfg_s = SynthConfig {
        num_demos_train: 1,
        num_demos_test: 1,
        frames_per_demo: [10, 12],
        image_size: [24, 32],
        shift_spec: ShiftSpec::default(),
        seed: 41,
        ..SynthConfig::default()
    };
    let t = prepare_task(&generate(&cfg_s).unwrap(), 16).unwrap();
    let target = t.target_unlabeled();
    assert_eq!(target.len(), t.test.iter().map(|d| d.len()).sum::<usize>());
}
