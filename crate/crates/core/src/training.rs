//! Losses and the training regimes: supervised, multi-task with a timing
//! head, joint adversarial adaptation through gradient reversal, two-stage
//! adversarial adaptation with a separate target encoder, and two-stage
//! training of the sequence models.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayD};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use scl_autograd::{Adam, AdamConfig, ParamId, ParamStore, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::dataset::{frame_batch, make_windows, split_indices, PreparedTask, UnlabeledFrames};
use crate::error::{Result, SclError};
use crate::models::{ArchId, HeadKind, ModelHandle, BACKBONE_PREFIX, TARGET_BACKBONE_PREFIX};
use crate::rng::component_rng;
use crate::seq2seq::{DecodeMode, SeqBatch};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub cls: f64,
    pub time: f64,
    pub dom: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            time: 1.0,
            dom: 1.0,
        }
    }
}

/// Gradient reversal coefficient over training progress `p` in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "schedule", rename_all = "snake_case", deny_unknown_fields)]
pub enum GrlSchedule {
    Constant { lambda: f64 },
    /// `max_lambda * (2 / (1 + exp(-10 p)) - 1)`.
    Warmup { max_lambda: f64 },
}

impl GrlSchedule {
    pub fn lambda(&self, progress: f64) -> f64 {
        match *self {
            GrlSchedule::Constant { lambda } => lambda,
            GrlSchedule::Warmup { max_lambda } => max_lambda * (2.0 / (1.0 + (-10.0 * progress).exp()) - 1.0),
        }
    }

    fn max(&self) -> f64 {
        match *self {
            GrlSchedule::Constant { lambda } => lambda,
            GrlSchedule::Warmup { max_lambda } => max_lambda,
        }
    }
}

impl Default for GrlSchedule {
    fn default() -> Self {
        GrlSchedule::Constant { lambda: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum EarlyStopping {
    #[default]
    Off,
    /// Stop after `patience` epochs without a new best validation accuracy.
    On { patience: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Random split over individual frames.
    #[default]
    PerFrame,
    /// Whole demonstrations go to one side of the split.
    PerDemo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointSelection {
    /// `best_val` for the supervised regimes, `last` for the adversarial
    /// ones, whose source-domain validation accuracy says nothing about
    /// adaptation.
    #[default]
    Auto,
    /// Keep the parameters of the epoch with the best validation accuracy.
    BestVal,
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AddaConfig {
    /// Adversarial epochs; `None` uses `epochs`.
    pub stage2_epochs: Option<usize>,
    /// Target encoder learning rate.
    pub learning_rate: f64,
    /// Discriminator learning rate.
    pub disc_learning_rate: f64,
    pub beta1: f64,
    /// Discriminator loss below this for `divergence_patience` consecutive
    /// epochs is reported as a divergence warning.
    pub divergence_threshold: f64,
    pub divergence_patience: usize,
}

impl Default for AddaConfig {
    fn default() -> Self {
        Self {
            stage2_epochs: None,
            learning_rate: 1e-4,
            disc_learning_rate: 1e-3,
            beta1: 0.5,
            divergence_threshold: 0.05,
            divergence_patience: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub split_ratio: f64,
    pub split_mode: SplitMode,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub grl: GrlSchedule,
    pub early_stopping: EarlyStopping,
    pub checkpoint_selection: CheckpointSelection,
    /// Weight of Success frames in the classification loss.
    pub pos_weight: Option<f64>,
    pub adda: AddaConfig,
    /// Backbone pretraining epochs of the sequence models; `None` uses
    /// `epochs`.
    pub seq_pretrain_epochs: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 100,
            learning_rate: 1e-3,
            split_ratio: 0.8,
            split_mode: SplitMode::PerFrame,
            seed: 0,
            loss_weights: LossWeights::default(),
            grl: GrlSchedule::default(),
            early_stopping: EarlyStopping::Off,
            checkpoint_selection: CheckpointSelection::Auto,
            pos_weight: None,
            adda: AddaConfig::default(),
            seq_pretrain_epochs: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SclError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad("split_ratio must lie strictly between 0 and 1");
        }
        let w = self.loss_weights;
        if [w.cls, w.time, w.dom].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return bad("loss weights must be finite and non-negative");
        }
        if !(self.grl.max() >= 0.0 && self.grl.max().is_finite()) {
            return Err(SclError::Validation(format!("GRL lambda must be non-negative, got {}", self.grl.max())));
        }
        if self.pos_weight.is_some_and(|p| !(p > 0.0 && p.is_finite())) {
            return bad("pos_weight must be positive");
        }
        if !(self.adda.learning_rate > 0.0 && self.adda.disc_learning_rate > 0.0) || !(0.0..1.0).contains(&self.adda.beta1) {
            return bad("adda learning_rate must be positive and beta1 in [0, 1)");
        }
        Ok(())
    }
}

/// Mean binary cross-entropy of probabilities against {0, 1} labels.
pub fn classification_loss(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(SclError::Shape {
            expected: format!("{} non-empty probabilities", labels.len()),
            got: format!("{}", probs.len()),
        });
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| if y == 1 { -p.ln() } else { -(1.0 - p).ln() })
        .sum();
    Ok(total / probs.len() as f64)
}

/// Mean squared error between predicted and true completion proportions.
pub fn timing_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(SclError::Shape {
            expected: format!("{} non-empty predictions", target.len()),
            got: format!("{}", pred.len()),
        });
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    /// Unweighted loss terms averaged over the epoch's batches.
    pub components: BTreeMap<String, f64>,
    /// Non-loss quantities such as discriminator accuracy or lambda.
    pub diagnostics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub arch: ArchId,
    /// `supervised`, `multitask`, `dann`, `adda_source`, `adda_adapted`,
    /// `seq_pretrain` or `sequence`.
    pub stage: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_acc: Option<f64>,
    pub train_time_per_image_s: f64,
    pub checkpoint: Option<PathBuf>,
    /// Final discriminator accuracy over source (tag 0) and target (tag 1)
    /// frames, for the adversarial regimes.
    pub final_domain_accuracy: Option<f64>,
    pub warnings: Vec<String>,
}

impl RunRecord {
    fn new(arch: ArchId, stage: &str, cfg: &TrainConfig) -> Self {
        Self {
            arch,
            stage: stage.to_string(),
            seed: cfg.seed,
            config: cfg.clone(),
            epochs: Vec::new(),
            best_epoch: None,
            best_val_acc: None,
            train_time_per_image_s: 0.0,
            checkpoint: None,
            final_domain_accuracy: None,
            warnings: Vec::new(),
        }
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn component(&self, name: &str) -> Vec<f64> {
        self.epochs
            .iter()
            .map(|e| e.components.get(name).copied().unwrap_or(f64::NAN))
            .collect()
    }

    /// Loss curves as CSV: `epoch,train_loss,val_loss,train_acc,val_acc,<components>`.
    pub fn curves_csv(&self) -> String {
        let keys: Vec<&String> = self.epochs.first().map(|e| e.components.keys().collect()).unwrap_or_default();
        let mut out = String::from("epoch,train_loss,val_loss,train_acc,val_acc");
        for k in &keys {
            out.push(',');
            out.push_str(k);
        }
        out.push('\n');
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}",
                e.epoch,
                e.train_loss,
                opt(e.val_loss),
                e.train_acc,
                opt(e.val_acc)
            ));
            for k in &keys {
                out.push_str(&format!(",{}", e.components[*k]));
            }
            out.push('\n');
        }
        out
    }

    /// Writes `<prefix>run.json` and `<prefix>curves.csv` into `dir`.
    pub fn write(&self, dir: &Path, prefix: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| SclError::io(dir, e))?;
        let run = dir.join(format!("{prefix}run.json"));
        fs::write(&run, serde_json::to_string_pretty(self)?).map_err(|e| SclError::io(&run, e))?;
        let csv = dir.join(format!("{prefix}curves.csv"));
        fs::write(&csv, self.curves_csv()).map_err(|e| SclError::io(&csv, e))
    }
}

type FrameRef = (usize, usize);

struct FrameSplit {
    train: Vec<FrameRef>,
    val: Vec<FrameRef>,
}

fn split_frames(task: &PreparedTask, cfg: &TrainConfig) -> Result<FrameSplit> {
    let refs = task.train_frame_refs();
    if refs.is_empty() {
        return Err(SclError::InsufficientData("training set has no frames".into()));
    }
    match cfg.split_mode {
        SplitMode::PerFrame => {
            let (tr, va) = split_indices(refs.len(), cfg.split_ratio, cfg.seed)?;
            Ok(FrameSplit {
                train: tr.iter().map(|&i| refs[i]).collect(),
                val: va.iter().map(|&i| refs[i]).collect(),
            })
        }
        SplitMode::PerDemo => {
            let (tr, _) = split_indices(task.train.len(), cfg.split_ratio, cfg.seed)?;
            let (train, val) = refs.into_iter().partition(|(d, _)| tr.binary_search(d).is_ok());
            Ok(FrameSplit { train, val })
        }
    }
}

fn gather(task: &PreparedTask, refs: &[FrameRef]) -> Result<(ArrayD<f64>, Vec<f64>, Vec<f64>)> {
    let imgs: Vec<_> = refs.iter().map(|&(d, s)| task.train[d].images[s].as_ref()).collect();
    let x = frame_batch(&imgs)?.into_dyn();
    let labels = refs.iter().map(|&(d, s)| f64::from(task.train[d].labels[s])).collect();
    let timing = refs.iter().map(|&(d, s)| task.train[d].timing[s]).collect();
    Ok((x, labels, timing))
}

fn gather_target(target: &UnlabeledFrames, idx: &[usize]) -> Result<(ArrayD<f64>, Vec<f64>)> {
    let imgs: Vec<_> = idx.iter().map(|&i| target.images[i].as_ref()).collect();
    Ok((frame_batch(&imgs)?.into_dyn(), idx.iter().map(|&i| target.timing[i]).collect()))
}

fn vec1(v: Vec<f64>) -> ArrayD<f64> {
    ArrayD::from_shape_vec(vec![v.len()], v).expect("1-d")
}

fn count_correct(tape: &Tape, logits: Var, labels: &[f64]) -> usize {
    tape.value(logits)
        .iter()
        .zip(labels)
        .filter(|(&z, &y)| (z >= 0.0) == (y >= 0.5))
        .count()
}

fn check_finite(tape: &Tape, loss: Var, epoch: usize, batch: usize, what: &str) -> Result<()> {
    let v = tape.scalar(loss);
    if !v.is_finite() {
        return Err(SclError::NumericalFailure {
            epoch,
            batch,
            detail: format!("{what} loss is {v}"),
        });
    }
    Ok(())
}

fn trainable_ids(store: &ParamStore, prefix: Option<&str>) -> Vec<ParamId> {
    store
        .ids()
        .filter(|&id| store.is_trainable(id) && prefix.is_none_or(|p| store.name(id).starts_with(p)))
        .collect()
}

/// Cycles through a shuffled index set, reshuffling at each pass.
struct Stream {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Stream {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            pos: n,
            rng,
        };
        s.pos = s.order.len();
        s
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.order.len()) {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Which frame head the supervised loop trains.
#[derive(Clone, Copy, PartialEq, Eq)]
enum FrameHead {
    Cls,
    Pretrain,
}

struct FrameRegime<'a> {
    head: FrameHead,
    timing: bool,
    dann_target: Option<&'a UnlabeledFrames>,
}

struct Selection {
    best_acc: f64,
    best_epoch: Option<usize>,
    snapshot: Option<ParamStore>,
    since_best: usize,
}

impl Selection {
    fn new() -> Self {
        Self {
            best_acc: f64::NEG_INFINITY,
            best_epoch: None,
            snapshot: None,
            since_best: 0,
        }
    }

    /// Returns true when training should stop early.
    fn observe(&mut self, epoch: usize, val_acc: Option<f64>, store: &ParamStore, cfg: &TrainConfig, adversarial: bool) -> bool {
        let Some(acc) = val_acc else { return false };
        // ties go to the later, longer-trained epoch
        if acc >= self.best_acc {
            let improved = acc > self.best_acc;
            self.best_acc = acc;
            self.best_epoch = Some(epoch);
            let keep = match cfg.checkpoint_selection {
                CheckpointSelection::Auto => !adversarial,
                CheckpointSelection::BestVal => true,
                CheckpointSelection::Last => false,
            };
            if keep {
                self.snapshot = Some(store.clone());
            }
            if improved {
                self.since_best = 0;
            } else {
                self.since_best += 1;
            }
        } else {
            self.since_best += 1;
        }
        matches!(cfg.early_stopping, EarlyStopping::On { patience } if self.since_best >= patience)
    }

    fn finish(self, model: &mut ModelHandle, record: &mut RunRecord) {
        record.best_epoch = self.best_epoch;
        record.best_val_acc = self.best_epoch.map(|_| self.best_acc);
        if let Some(s) = self.snapshot {
            model.store = s;
        }
    }
}

fn frame_logits(model: &ModelHandle, tape: &mut Tape, feats: Var, head: FrameHead) -> Result<Var> {
    match head {
        FrameHead::Cls => model.cls_logits(tape, feats),
        FrameHead::Pretrain => model.frame_head_logits(tape, feats),
    }
}

/// Validation loss and accuracy of a frame head on `refs`.
fn eval_frames(model: &ModelHandle, task: &PreparedTask, refs: &[FrameRef], head: FrameHead, target_encoder: bool) -> Result<Option<(f64, f64)>> {
    if refs.is_empty() {
        return Ok(None);
    }
    let (mut loss, mut correct) = (0.0, 0usize);
    for chunk in refs.chunks(32) {
        let (x, labels, _) = gather(task, chunk)?;
        let mut tape = Tape::new();
        let x = tape.constant(x);
        let f = model.encode(&mut tape, x, target_encoder)?;
        let z = frame_logits(model, &mut tape, f, head)?;
        correct += count_correct(&tape, z, &labels);
        let l = tape.bce_with_logits(z, vec1(labels), 1.0);
        loss += tape.scalar(l) * chunk.len() as f64;
    }
    let n = refs.len() as f64;
    Ok(Some((loss / n, correct as f64 / n)))
}

fn mean_map(sums: BTreeMap<String, f64>, n: usize) -> BTreeMap<String, f64> {
    sums.into_iter().map(|(k, v)| (k, v / n.max(1) as f64)).collect()
}

fn add_to(map: &mut BTreeMap<String, f64>, key: &str, v: f64) {
    *map.entry(key.to_string()).or_insert(0.0) += v;
}

fn train_frames(model: &mut ModelHandle, task: &PreparedTask, cfg: &TrainConfig, regime: &FrameRegime, epochs: usize, stage: &str) -> Result<RunRecord> {
    cfg.validate()?;
    let mut record = RunRecord::new(model.arch(), stage, cfg);
    let split = split_frames(task, cfg)?;
    let w = cfg.loss_weights;
    let pos_weight = cfg.pos_weight.unwrap_or(1.0);
    let scope = trainable_ids(&model.store, None);
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.learning_rate,
            ..AdamConfig::default()
        },
        scope,
    );
    let mut source = Stream::new(split.train.len(), component_rng(cfg.seed, "shuffle/source"));
    let mut target = regime
        .dann_target
        .map(|t| Stream::new(t.len(), component_rng(cfg.seed, "shuffle/target")));
    let batches = split.train.len().div_ceil(cfg.batch_size);
    let mut selection = Selection::new();
    let mut images_seen = 0usize;
    let mut elapsed = 0.0;

    for epoch in 0..epochs {
        let start = Instant::now();
        let (mut total, mut correct, mut seen) = (0.0, 0usize, 0usize);
        let mut comps = BTreeMap::new();
        let mut diag = BTreeMap::new();
        for b in 0..batches {
            let idx = source.next_batch(cfg.batch_size.min(split.train.len() - b * cfg.batch_size));
            let refs: Vec<FrameRef> = idx.iter().map(|&i| split.train[i]).collect();
            let (x, labels, timing) = gather(task, &refs)?;
            let mut tape = Tape::new();
            let xs = tape.constant(x);
            let fs = model.encode(&mut tape, xs, false)?;
            let z = frame_logits(model, &mut tape, fs, regime.head)?;
            correct += count_correct(&tape, z, &labels);
            seen += refs.len();
            let l_cls = tape.bce_with_logits(z, vec1(labels), pos_weight);
            add_to(&mut comps, "cls", tape.scalar(l_cls));
            let mut loss = tape.scale(l_cls, w.cls);
            if regime.timing {
                let t = model.timing_logits(&mut tape, fs)?;
                let t = tape.sigmoid(t);
                let l_time = tape.mse(t, vec1(timing));
                add_to(&mut comps, "time", tape.scalar(l_time));
                let s = tape.scale(l_time, w.time);
                loss = tape.add(loss, s);
            }
            if let (Some(frames), Some(stream)) = (regime.dann_target, target.as_mut()) {
                let progress = (epoch * batches + b) as f64 / (epochs * batches) as f64;
                model.state.grl_lambda = cfg.grl.lambda(progress);
                let tidx = stream.next_batch(refs.len());
                let (xt, _) = gather_target(frames, &tidx)?;
                let xt = tape.constant(xt);
                let ft = model.encode(&mut tape, xt, false)?;
                let ds = model.domain_logits(&mut tape, fs)?;
                let dt = model.domain_logits(&mut tape, ft)?;
                let d = tape.concat(&[ds, dt], 0);
                let tags: Vec<f64> = std::iter::repeat_n(0.0, refs.len()).chain(std::iter::repeat_n(1.0, tidx.len())).collect();
                let dom_acc = count_correct(&tape, d, &tags) as f64 / tags.len() as f64;
                let l_dom = tape.bce_with_logits(d, vec1(tags), 1.0);
                add_to(&mut comps, "dom", tape.scalar(l_dom));
                add_to(&mut diag, "dom_acc", dom_acc);
                add_to(&mut diag, "lambda", model.state.grl_lambda);
                images_seen += tidx.len();
                let s = tape.scale(l_dom, w.dom);
                loss = tape.add(loss, s);
            }
            check_finite(&tape, loss, epoch, b, stage)?;
            total += tape.scalar(loss);
            let grads = tape.backward(loss);
            if !grads.all_finite() {
                return Err(SclError::NumericalFailure {
                    epoch,
                    batch: b,
                    detail: "non-finite gradient".into(),
                });
            }
            adam.step(&mut model.store, &grads);
        }
        images_seen += seen;
        elapsed += start.elapsed().as_secs_f64();
        let val = eval_frames(model, task, &split.val, regime.head, false)?;
        record.epochs.push(EpochRecord {
            epoch,
            train_loss: total / batches as f64,
            val_loss: val.map(|v| v.0),
            train_acc: correct as f64 / seen as f64,
            val_acc: val.map(|v| v.1),
            components: mean_map(comps, batches),
            diagnostics: mean_map(diag, batches),
        });
        log::debug!("{stage} epoch {epoch}: loss {:.5} val {:?}", total / batches as f64, val);
        if selection.observe(epoch, val.map(|v| v.1), &model.store, cfg, regime.dann_target.is_some()) {
            break;
        }
    }
    selection.finish(model, &mut record);
    record.train_time_per_image_s = if images_seen > 0 { elapsed / images_seen as f64 } else { 0.0 };
    Ok(record)
}

/// Discriminator accuracy over source frames (tag 0, source encoder) and
/// target frames (tag 1, adapted encoder when present).
pub fn domain_accuracy(model: &ModelHandle, task: &PreparedTask, target: &UnlabeledFrames) -> Result<f64> {
    let refs = task.train_frame_refs();
    let mut correct = 0usize;
    for chunk in refs.chunks(32) {
        let (x, _, _) = gather(task, chunk)?;
        let mut tape = Tape::new();
        let x = tape.constant(x);
        let f = model.encode(&mut tape, x, false)?;
        let d = model.domain_logits(&mut tape, f)?;
        correct += count_correct(&tape, d, &vec![0.0; chunk.len()]);
    }
    let idx: Vec<usize> = (0..target.len()).collect();
    for chunk in idx.chunks(32) {
        let (x, _) = gather_target(target, chunk)?;
        let mut tape = Tape::new();
        let x = tape.constant(x);
        let f = model.encode(&mut tape, x, model.target_backbone.is_some())?;
        let d = model.domain_logits(&mut tape, f)?;
        correct += count_correct(&tape, d, &vec![1.0; chunk.len()]);
    }
    Ok(correct as f64 / (refs.len() + target.len()) as f64)
}

fn save_checkpoint(model: &ModelHandle, out: Option<&Path>, name: &str, record: &mut RunRecord) -> Result<()> {
    if let Some(dir) = out {
        let path = dir.join(name);
        model.save(&path)?;
        record.checkpoint = Some(path);
    }
    Ok(())
}

fn require_head(model: &ModelHandle, head: HeadKind, what: &str) -> Result<()> {
    if model.arch().has_head(head) {
        Ok(())
    } else {
        Err(SclError::Capability {
            arch: model.arch().to_string(),
            capability: what.to_string(),
        })
    }
}

/// Plain supervised training of a frame classifier. Sequence architectures
/// run their two-stage schedule and the sequence-stage record is returned.
pub fn train_supervised(model: &mut ModelHandle, task: &PreparedTask, cfg: &TrainConfig, out: Option<&Path>) -> Result<RunRecord> {
    if model.arch().is_sequence() {
        return Ok(train_sequence(model, task, cfg, out)?.1);
    }
    require_head(model, HeadKind::Classification, "classification head")?;
    let regime = FrameRegime {
        head: FrameHead::Cls,
        timing: false,
        dann_target: None,
    };
    let mut record = train_frames(model, task, cfg, &regime, cfg.epochs, "supervised")?;
    save_checkpoint(model, out, "checkpoint", &mut record)?;
    Ok(record)
}

/// Classification plus timing regression on a shared backbone.
pub fn train_multitask(model: &mut ModelHandle, task: &PreparedTask, cfg: &TrainConfig, out: Option<&Path>) -> Result<RunRecord> {
    require_head(model, HeadKind::Timing, "timing head")?;
    let regime = FrameRegime {
        head: FrameHead::Cls,
        timing: true,
        dann_target: None,
    };
    let mut record = train_frames(model, task, cfg, &regime, cfg.epochs, "multitask")?;
    save_checkpoint(model, out, "checkpoint", &mut record)?;
    Ok(record)
}

fn require_target(target: &UnlabeledFrames) -> Result<()> {
    if target.is_empty() {
        return Err(SclError::InsufficientData(
            "domain adaptation needs unlabeled target-domain frames; supply a test split with target demonstrations".into(),
        ));
    }
    Ok(())
}

/// Joint training of classifier and domain head, with gradient reversal
/// between the backbone and the domain head.
pub fn train_dann(model: &mut ModelHandle, task: &PreparedTask, target: &UnlabeledFrames, cfg: &TrainConfig, out: Option<&Path>) -> Result<RunRecord> {
    if model.arch() != ArchId::Dann {
        return Err(SclError::Capability {
            arch: model.arch().to_string(),
            capability: "gradient-reversal domain head".into(),
        });
    }
    require_target(target)?;
    let regime = FrameRegime {
        head: FrameHead::Cls,
        timing: false,
        dann_target: Some(target),
    };
    let mut record = train_frames(model, task, cfg, &regime, cfg.epochs, "dann")?;
    record.final_domain_accuracy = Some(domain_accuracy(model, task, target)?);
    save_checkpoint(model, out, "checkpoint", &mut record)?;
    Ok(record)
}

/// Two-stage adversarial adaptation. Stage 1 trains the source encoder and
/// classifier (plus timing head for T_FCN_ADDA). Stage 2 copies the source
/// encoder into the target encoder and alternates discriminator updates
/// with target-encoder updates against the inverted domain label; the
/// classifier stays frozen. Returns the source and adapted records.
pub fn train_adda(model: &mut ModelHandle, task: &PreparedTask, target: &UnlabeledFrames, cfg: &TrainConfig, out: Option<&Path>) -> Result<(RunRecord, RunRecord)> {
    if !model.arch().is_adda() {
        return Err(SclError::Capability {
            arch: model.arch().to_string(),
            capability: "target encoder".into(),
        });
    }
    require_target(target)?;
    let with_timing = model.arch().has_head(HeadKind::Timing);
    let regime = FrameRegime {
        head: FrameHead::Cls,
        timing: with_timing,
        dann_target: None,
    };
    model.state.use_target_encoder = false;
    let mut source = train_frames(model, task, cfg, &regime, cfg.epochs, "adda_source")?;
    save_checkpoint(model, out, "checkpoint_source", &mut source)?;

    model
        .store
        .copy_prefix(&format!("{BACKBONE_PREFIX}."), &format!("{TARGET_BACKBONE_PREFIX}."));
    let mut adapted = RunRecord::new(model.arch(), "adda_adapted", cfg);
    let split = split_frames(task, cfg)?;
    let w = cfg.loss_weights;
    let adam_cfg = AdamConfig {
        lr: cfg.adda.learning_rate,
        beta1: cfg.adda.beta1,
        ..AdamConfig::default()
    };
    let disc_cfg = AdamConfig {
        lr: cfg.adda.disc_learning_rate,
        ..adam_cfg
    };
    let mut disc_opt = Adam::new(disc_cfg, trainable_ids(&model.store, Some("domain.")));
    let mut enc_opt = Adam::new(adam_cfg, trainable_ids(&model.store, Some(&format!("{TARGET_BACKBONE_PREFIX}."))));
    let mut src_stream = Stream::new(split.train.len(), component_rng(cfg.seed, "adda/source"));
    let mut tgt_stream = Stream::new(target.len(), component_rng(cfg.seed, "shuffle/target"));
    let batches = split.train.len().div_ceil(cfg.batch_size);
    let epochs = cfg.adda.stage2_epochs.unwrap_or(cfg.epochs);
    let mut low_disc = 0usize;
    let mut warned = false;
    let mut images_seen = 0usize;
    let mut elapsed = 0.0;

    for epoch in 0..epochs {
        let start = Instant::now();
        let mut comps = BTreeMap::new();
        let mut diag = BTreeMap::new();
        let (mut total, mut fooled, mut seen) = (0.0, 0usize, 0usize);
        for b in 0..batches {
            let sidx = src_stream.next_batch(cfg.batch_size);
            let refs: Vec<FrameRef> = sidx.iter().map(|&i| split.train[i]).collect();
            let tidx = tgt_stream.next_batch(cfg.batch_size);
            let (xs, _, _) = gather(task, &refs)?;
            let (xt, t_timing) = gather_target(target, &tidx)?;

            // discriminator step on frozen features
            let mut tape = Tape::new();
            let xs_v = tape.constant(xs);
            let xt_v = tape.constant(xt.clone());
            let fs = model.encode(&mut tape, xs_v, false)?;
            let ft = model.encode(&mut tape, xt_v, true)?;
            let fs = tape.detach(fs);
            let ft = tape.detach(ft);
            let feats = tape.concat(&[fs, ft], 0);
            let d = model.domain_logits(&mut tape, feats)?;
            let tags: Vec<f64> = std::iter::repeat_n(0.0, refs.len()).chain(std::iter::repeat_n(1.0, tidx.len())).collect();
            add_to(&mut diag, "disc_acc", count_correct(&tape, d, &tags) as f64 / tags.len() as f64);
            let l_disc = tape.bce_with_logits(d, vec1(tags), 1.0);
            check_finite(&tape, l_disc, epoch, b, "discriminator")?;
            add_to(&mut comps, "disc", tape.scalar(l_disc));
            let grads = tape.backward(l_disc);
            disc_opt.step(&mut model.store, &grads);

            // target encoder step against the inverted label
            let mut tape = Tape::new();
            let xt_v = tape.constant(xt);
            let ft = model.encode(&mut tape, xt_v, true)?;
            let d = model.domain_logits(&mut tape, ft)?;
            fooled += count_correct(&tape, d, &vec![0.0; tidx.len()]);
            seen += tidx.len();
            let l_adv = tape.bce_with_logits(d, vec1(vec![0.0; tidx.len()]), 1.0);
            add_to(&mut comps, "adv", tape.scalar(l_adv));
            let mut loss = tape.scale(l_adv, w.dom);
            if with_timing {
                // completion proportion is known for unlabeled frames too
                let t = model.timing_logits(&mut tape, ft)?;
                let t = tape.sigmoid(t);
                let l_time = tape.mse(t, vec1(t_timing));
                add_to(&mut comps, "time", tape.scalar(l_time));
                let s = tape.scale(l_time, w.time);
                loss = tape.add(loss, s);
            }
            check_finite(&tape, loss, epoch, b, "target encoder")?;
            total += tape.scalar(loss);
            let grads = tape.backward(loss);
            enc_opt.step(&mut model.store, &grads);
            images_seen += refs.len() + 2 * tidx.len();
        }
        elapsed += start.elapsed().as_secs_f64();
        let comps = mean_map(comps, batches);
        if comps["disc"] < cfg.adda.divergence_threshold {
            low_disc += 1;
        } else {
            low_disc = 0;
        }
        if low_disc >= cfg.adda.divergence_patience && !warned {
            let msg = format!(
                "adversarial stage diverging: discriminator loss below {} for {} consecutive epochs (epoch {epoch})",
                cfg.adda.divergence_threshold, cfg.adda.divergence_patience
            );
            log::warn!("{msg}");
            adapted.warnings.push(msg);
            warned = true;
        }
        let val = eval_frames(model, task, &split.val, FrameHead::Cls, true)?;
        adapted.epochs.push(EpochRecord {
            epoch,
            train_loss: total / batches as f64,
            val_loss: val.map(|v| v.0),
            train_acc: fooled as f64 / seen.max(1) as f64,
            val_acc: val.map(|v| v.1),
            components: comps,
            diagnostics: mean_map(diag, batches),
        });
    }
    model.state.use_target_encoder = true;
    adapted.train_time_per_image_s = if images_seen > 0 { elapsed / images_seen as f64 } else { 0.0 };
    adapted.final_domain_accuracy = Some(domain_accuracy(model, task, target)?);
    save_checkpoint(model, out, "checkpoint", &mut adapted)?;
    Ok((source, adapted))
}

struct WindowSet {
    /// Per training demo: frame features `[j, F]`.
    features: Vec<Array2<f64>>,
    train: Vec<(usize, crate::dataset::Window)>,
    val: Vec<(usize, crate::dataset::Window)>,
}

fn window_batch(set: &WindowSet, items: &[&(usize, crate::dataset::Window)]) -> SeqBatch {
    let f = set.features[0].ncols();
    let t = items[0].1.frame_indices.len();
    let mut feats = ndarray::Array3::zeros((items.len(), t, f));
    let mut pad = Array2::from_elem((items.len(), t), false);
    let mut labels = Array2::zeros((items.len(), t));
    for (b, (d, w)) in items.iter().enumerate() {
        for (p, &fi) in w.frame_indices.iter().enumerate() {
            feats
                .index_axis_mut(ndarray::Axis(0), b)
                .row_mut(p)
                .assign(&set.features[*d].row(fi));
            pad[[b, p]] = w.pad_mask[p];
            labels[[b, p]] = f64::from(w.labels[p]);
        }
    }
    SeqBatch {
        features: feats,
        pad_mask: pad,
        labels,
    }
}

fn eval_windows(model: &ModelHandle, set: &WindowSet) -> Result<Option<(f64, f64)>> {
    if set.val.is_empty() {
        return Ok(None);
    }
    let seq = model.seq.as_ref().expect("sequence head");
    let (mut loss, mut correct) = (0.0, 0usize);
    for chunk in set.val.chunks(32) {
        let items: Vec<_> = chunk.iter().collect();
        let batch = window_batch(set, &items);
        let mut tape = Tape::new();
        let out = seq.forward(&mut tape, &model.store, &batch, DecodeMode::TeacherForcing)?;
        let l = tape.bce_with_logits(out.logits, batch.labels.clone().into_dyn(), 1.0);
        loss += tape.scalar(l) * chunk.len() as f64;
        let probs = seq.probabilities(&model.store, &batch, DecodeMode::Autoregressive)?;
        let last = batch.window_len() - 1;
        correct += probs
            .column(last)
            .iter()
            .zip(batch.labels.column(last))
            .filter(|(&p, &y)| (p >= 0.5) == (y >= 0.5))
            .count();
    }
    let n = set.val.len() as f64;
    Ok(Some((loss / n, correct as f64 / n)))
}

/// Sequence models: pretrain the backbone with a frame head, freeze it,
/// then fit the sequence head on windows of backbone features with teacher
/// forcing. Windows follow the frame split of their last frame.
pub fn train_sequence(model: &mut ModelHandle, task: &PreparedTask, cfg: &TrainConfig, out: Option<&Path>) -> Result<(RunRecord, RunRecord)> {
    if model.seq.is_none() {
        return Err(SclError::Capability {
            arch: model.arch().to_string(),
            capability: "sequence head".into(),
        });
    }
    let regime = FrameRegime {
        head: FrameHead::Pretrain,
        timing: false,
        dann_target: None,
    };
    let pre_epochs = cfg.seq_pretrain_epochs.unwrap_or(cfg.epochs);
    let pretrain = train_frames(model, task, cfg, &regime, pre_epochs, "seq_pretrain")?;

    let split = split_frames(task, cfg)?;
    let val_set: std::collections::BTreeSet<FrameRef> = split.val.iter().copied().collect();
    let mut set = WindowSet {
        features: Vec::with_capacity(task.train.len()),
        train: Vec::new(),
        val: Vec::new(),
    };
    for (d, demo) in task.train.iter().enumerate() {
        let imgs: Vec<_> = demo.images.iter().map(|a| a.as_ref()).collect();
        set.features.push(model.features(&imgs)?);
        for w in make_windows(&demo.labels, model.config.seq.window)? {
            if val_set.contains(&(d, w.end)) {
                set.val.push((d, w));
            } else {
                set.train.push((d, w));
            }
        }
    }

    let mut record = RunRecord::new(model.arch(), "sequence", cfg);
    let scope = trainable_ids(&model.store, Some("seq."));
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.learning_rate,
            ..AdamConfig::default()
        },
        scope,
    );
    let mut stream = Stream::new(set.train.len(), component_rng(cfg.seed, "shuffle/windows"));
    let batches = set.train.len().div_ceil(cfg.batch_size);
    let pos_weight = cfg.pos_weight.unwrap_or(1.0);
    let mut selection = Selection::new();
    let mut elapsed = 0.0;
    let mut seen_total = 0usize;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let (mut total, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for b in 0..batches {
            let idx = stream.next_batch(cfg.batch_size.min(set.train.len() - b * cfg.batch_size));
            let items: Vec<_> = idx.iter().map(|&i| &set.train[i]).collect();
            let batch = window_batch(&set, &items);
            let seq = model.seq.as_ref().expect("checked");
            let mut tape = Tape::new();
            let outv = seq.forward(&mut tape, &model.store, &batch, DecodeMode::TeacherForcing)?;
            let labels_flat: Vec<f64> = batch.labels.iter().copied().collect();
            correct += count_correct(&tape, outv.logits, &labels_flat);
            seen += labels_flat.len();
            let l = tape.bce_with_logits(outv.logits, batch.labels.clone().into_dyn(), pos_weight);
            let loss = tape.scale(l, cfg.loss_weights.cls);
            check_finite(&tape, loss, epoch, b, "sequence")?;
            total += tape.scalar(loss);
            let grads = tape.backward(loss);
            adam.step(&mut model.store, &grads);
        }
        seen_total += seen / model.config.seq.window.max(1);
        elapsed += start.elapsed().as_secs_f64();
        let val = eval_windows(model, &set)?;
        record.epochs.push(EpochRecord {
            epoch,
            train_loss: total / batches.max(1) as f64,
            val_loss: val.map(|v| v.0),
            train_acc: correct as f64 / seen.max(1) as f64,
            val_acc: val.map(|v| v.1),
            components: BTreeMap::from([("cls".to_string(), total / batches.max(1) as f64 / cfg.loss_weights.cls.max(f64::MIN_POSITIVE))]),
            diagnostics: BTreeMap::new(),
        });
        if selection.observe(epoch, val.map(|v| v.1), &model.store, cfg, false) {
            break;
        }
    }
    selection.finish(model, &mut record);
    record.train_time_per_image_s = pretrain.train_time_per_image_s
        + if seen_total > 0 { elapsed / seen_total as f64 } else { 0.0 };
    save_checkpoint(model, out, "checkpoint", &mut record)?;
    Ok((pretrain, record))
}

/// Runs the regime that belongs to the model's architecture. Adaptation
/// regimes use the task's target split with labels removed.
pub fn train(model: &mut ModelHandle, task: &PreparedTask, cfg: &TrainConfig, out: Option<&Path>) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    model.set_mode(crate::models::Mode::Train);
    let result = match model.arch() {
        ArchId::Nasnet | ArchId::Fcn => train_supervised(model, task, cfg, out).map(|r| vec![r]),
        ArchId::TFcn => train_multitask(model, task, cfg, out).map(|r| vec![r]),
        ArchId::AttnRnn | ArchId::Transformer => train_sequence(model, task, cfg, out).map(|(a, b)| vec![a, b]),
        ArchId::Dann => train_dann(model, task, &task.target_unlabeled(), cfg, out).map(|r| vec![r]),
        ArchId::Adda | ArchId::TFcnAdda => train_adda(model, task, &task.target_unlabeled(), cfg, out).map(|(a, b)| vec![a, b]),
    };
    model.set_mode(crate::models::Mode::Infer);
    result
}
