//! Prediction heads, the gradient reversal layer and assembly of the eight
//! classifier architectures.

pub mod checkpoint;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array4, Axis};
use rand::Rng;
use scl_autograd::nn::{Init, Linear};
use scl_autograd::{ParamStore, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::backbones::{Backbone, BackboneConfig, ExtractorConfig, FcnBackbone, PretrainedExtractor};
use crate::dataset::{frame_batch, make_windows, FrameBatch, PreparedDemo};
use crate::error::{Result, SclError};
use crate::rng::component_rng;
use crate::seq2seq::{sigmoid, DecodeMode, SeqBatch, SeqConfig, SeqHead, SeqKind};

/// Frames per forward pass at inference.
const INFER_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ArchId {
    #[serde(rename = "NASNET")]
    Nasnet,
    #[serde(rename = "FCN")]
    Fcn,
    #[serde(rename = "T_FCN")]
    TFcn,
    #[serde(rename = "ATTN_RNN")]
    AttnRnn,
    #[serde(rename = "TRANSFORMER")]
    Transformer,
    #[serde(rename = "DANN")]
    Dann,
    #[serde(rename = "ADDA")]
    Adda,
    #[serde(rename = "T_FCN_ADDA")]
    TFcnAdda,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Classification,
    Timing,
    Domain,
    Sequence,
}

impl ArchId {
    pub const ALL: [ArchId; 8] = [
        ArchId::Nasnet,
        ArchId::Fcn,
        ArchId::TFcn,
        ArchId::AttnRnn,
        ArchId::Transformer,
        ArchId::Dann,
        ArchId::Adda,
        ArchId::TFcnAdda,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ArchId::Nasnet => "NASNET",
            ArchId::Fcn => "FCN",
            ArchId::TFcn => "T_FCN",
            ArchId::AttnRnn => "ATTN_RNN",
            ArchId::Transformer => "TRANSFORMER",
            ArchId::Dann => "DANN",
            ArchId::Adda => "ADDA",
            ArchId::TFcnAdda => "T_FCN_ADDA",
        }
    }

    pub fn heads(self) -> &'static [HeadKind] {
        use HeadKind::*;
        match self {
            ArchId::Nasnet | ArchId::Fcn => &[Classification],
            ArchId::TFcn => &[Classification, Timing],
            ArchId::AttnRnn | ArchId::Transformer => &[Sequence],
            ArchId::Dann | ArchId::Adda => &[Classification, Domain],
            ArchId::TFcnAdda => &[Classification, Timing, Domain],
        }
    }

    pub fn has_head(self, head: HeadKind) -> bool {
        self.heads().contains(&head)
    }

    pub fn is_sequence(self) -> bool {
        matches!(self, ArchId::AttnRnn | ArchId::Transformer)
    }

    /// Architectures adapted with a separate target encoder.
    pub fn is_adda(self) -> bool {
        matches!(self, ArchId::Adda | ArchId::TFcnAdda)
    }

    /// Domain head preceded by gradient reversal.
    pub fn has_grl(self) -> bool {
        self == ArchId::Dann
    }
}

impl fmt::Display for ArchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchId {
    type Err = SclError;

    fn from_str(s: &str) -> Result<Self> {
        ArchId::ALL
            .into_iter()
            .find(|a| a.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| SclError::UnknownArch(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Hidden width of the two-layer heads.
    pub hidden: usize,
    /// Hidden widths of the NASNET fully connected stack (six layers with
    /// the output unit).
    pub nasnet_layers: Vec<usize>,
    /// Start every head's output layer at zero (outputs exactly 0.5).
    pub zero_init_output: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            nasnet_layers: vec![256, 128, 64, 32, 16],
            zero_init_output: false,
        }
    }
}

/// Stack of linear layers with rectifiers between them, ending in one logit.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, in_dim: usize, hidden: &[usize], zero_out: bool, rng: &mut R) -> Self {
        let mut dims = vec![in_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let init = if i + 1 < n {
                    Init::HeUniform
                } else if zero_out {
                    Init::Zeros
                } else {
                    Init::XavierUniform
                };
                Linear::new(store, &format!("{prefix}.fc{i}"), dims[i], dims[i + 1], init, rng)
            })
            .collect();
        Self { layers }
    }

    /// `[B, in]` to logits `[B]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let b = tape.shape(x)[0];
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h);
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        tape.reshape(h, &[b])
    }

    pub fn output_layer(&self) -> &Linear {
        self.layers.last().expect("at least one layer")
    }
}

/// Identity forward, gradient multiplied by `-lambda` backward.
pub fn grl_apply(tape: &mut Tape, x: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(SclError::Validation(format!("GRL lambda must be finite and non-negative, got {lambda}")));
    }
    Ok(tape.grad_reverse(x, lambda))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arch: ArchId,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    /// Required by NASNET; ignored by the other architectures.
    pub extractor: Option<ExtractorConfig>,
    pub seq: SeqConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: ArchId::Fcn,
            backbone: BackboneConfig::default(),
            head: HeadConfig::default(),
            extractor: Some(ExtractorConfig::default()),
            seq: SeqConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Infer,
}

/// Mutable state saved with a checkpoint besides parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelState {
    /// Route inference through the adapted target encoder.
    pub use_target_encoder: bool,
    pub grl_lambda: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: u32,
    arch_id: ArchId,
    seed: u64,
    config: ModelConfig,
    state: ModelState,
}

/// Per-frame predictions for one demonstration.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoPrediction {
    pub probs: Vec<f64>,
    pub timing: Option<Vec<f64>>,
}

/// An assembled architecture with its parameters.
#[derive(Debug, Clone)]
pub struct ModelHandle {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    /// Separate encoder adapted to the target domain (ADDA family).
    pub target_backbone: Option<FcnBackbone>,
    pub cls: Option<Mlp>,
    pub timing: Option<Mlp>,
    pub domain: Option<Mlp>,
    pub seq: Option<SeqHead>,
    /// Frame classifier used to pretrain the backbone of sequence models.
    pub frame_head: Option<Mlp>,
    pub state: ModelState,
    pub mode: Mode,
}

pub const BACKBONE_PREFIX: &str = "backbone";
pub const TARGET_BACKBONE_PREFIX: &str = "target_backbone";

/// Builds an architecture with deterministic per-component initialization:
/// backbone and classification head start from the same values in every
/// architecture that has them.
pub fn build_model(config: &ModelConfig) -> Result<ModelHandle> {
    let arch = config.arch;
    let mut store = ParamStore::new();
    let seed = config.seed;
    let backbone = if arch == ArchId::Nasnet {
        Backbone::Pretrained(PretrainedExtractor::new(
            &mut store,
            config.extractor.as_ref(),
            config.backbone.input_size,
        )?)
    } else {
        Backbone::Fcn(FcnBackbone::new(
            &mut store,
            BACKBONE_PREFIX,
            &config.backbone,
            &mut component_rng(seed, "backbone"),
        )?)
    };
    let f = backbone.output_dim();
    let h = &config.head;
    let zero = h.zero_init_output;
    let two_layer = [h.hidden];

    let cls = arch.has_head(HeadKind::Classification).then(|| {
        let hidden: &[usize] = if arch == ArchId::Nasnet { &h.nasnet_layers } else { &two_layer };
        Mlp::new(&mut store, "cls", f, hidden, zero, &mut component_rng(seed, "cls"))
    });
    let timing = arch
        .has_head(HeadKind::Timing)
        .then(|| Mlp::new(&mut store, "timing", f, &two_layer, zero, &mut component_rng(seed, "timing")));
    let domain = arch
        .has_head(HeadKind::Domain)
        .then(|| Mlp::new(&mut store, "domain", f, &two_layer, zero, &mut component_rng(seed, "domain")));
    let (seq, frame_head) = if arch.is_sequence() {
        let kind = if arch == ArchId::AttnRnn { SeqKind::Attention } else { SeqKind::Transformer };
        let mut rng = component_rng(seed, "seq");
        let head = SeqHead::new(&mut store, "seq", kind, f, &config.seq, &mut rng)?;
        if zero {
            let out = *head.output_layer();
            store.get_mut(out.weight).fill(0.0);
        }
        let frame = Mlp::new(&mut store, "frame_head", f, &two_layer, false, &mut component_rng(seed, "cls"));
        (Some(head), Some(frame))
    } else {
        (None, None)
    };
    let target_backbone = if arch.is_adda() {
        let tb = FcnBackbone::new(
            &mut store,
            TARGET_BACKBONE_PREFIX,
            &config.backbone,
            &mut component_rng(seed, "target_backbone"),
        )?;
        store.copy_prefix(&format!("{BACKBONE_PREFIX}."), &format!("{TARGET_BACKBONE_PREFIX}."));
        Some(tb)
    } else {
        None
    };
    let model = ModelHandle {
        config: config.clone(),
        store,
        backbone,
        target_backbone,
        cls,
        timing,
        domain,
        seq,
        frame_head,
        state: ModelState {
            use_target_encoder: false,
            grl_lambda: 1.0,
        },
        mode: Mode::Infer,
    };
    log::info!(
        "built {arch}: {} parameters ({})",
        model.num_params(),
        model
            .param_report()
            .iter()
            .map(|(k, n)| format!("{k} {n}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok(model)
}

impl ModelHandle {
    pub fn arch(&self) -> ArchId {
        self.config.arch
    }

    pub fn heads(&self) -> &'static [HeadKind] {
        self.arch().heads()
    }

    pub fn input_size(&self) -> usize {
        self.backbone.input_size()
    }

    pub fn num_params(&self) -> usize {
        self.store.num_elements()
    }

    /// Parameter count per top-level component, in a fixed order.
    pub fn param_report(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for id in self.store.ids() {
            let top = self.store.name(id).split('.').next().unwrap_or_default().to_string();
            let n = self.store.get(id).len();
            match out.iter_mut().find(|(k, _)| *k == top) {
                Some((_, c)) => *c += n,
                None => out.push((top, n)),
            }
        }
        out
    }

    fn capability(&self, what: &str) -> SclError {
        SclError::Capability {
            arch: self.arch().to_string(),
            capability: what.to_string(),
        }
    }

    /// Backbone features on the tape. `target` selects the adapted encoder
    /// when the architecture has one.
    pub fn encode(&self, tape: &mut Tape, x: Var, target: bool) -> Result<Var> {
        match (&self.target_backbone, target) {
            (Some(tb), true) => tb.forward(tape, &self.store, x),
            _ => self.backbone.forward(tape, &self.store, x),
        }
    }

    pub fn cls_logits(&self, tape: &mut Tape, feats: Var) -> Result<Var> {
        let head = self.cls.as_ref().ok_or_else(|| self.capability("classification head"))?;
        Ok(head.forward(tape, &self.store, feats))
    }

    pub fn frame_head_logits(&self, tape: &mut Tape, feats: Var) -> Result<Var> {
        let head = self.frame_head.as_ref().ok_or_else(|| self.capability("frame pretraining head"))?;
        Ok(head.forward(tape, &self.store, feats))
    }

    pub fn timing_logits(&self, tape: &mut Tape, feats: Var) -> Result<Var> {
        let head = self.timing.as_ref().ok_or_else(|| self.capability("timing head"))?;
        Ok(head.forward(tape, &self.store, feats))
    }

    /// Domain logits; DANN inserts gradient reversal with the current lambda.
    pub fn domain_logits(&self, tape: &mut Tape, feats: Var) -> Result<Var> {
        let head = self.domain.as_ref().ok_or_else(|| self.capability("domain head"))?;
        let input = if self.arch().has_grl() {
            grl_apply(tape, feats, self.state.grl_lambda)?
        } else {
            feats
        };
        Ok(head.forward(tape, &self.store, input))
    }

    fn check_batch(&self, images: &Array4<f64>) -> Result<()> {
        let s = self.input_size();
        let d = images.dim();
        if d.1 != 3 || d.2 != s || d.3 != s {
            return Err(SclError::Shape {
                expected: format!("batch of {s}x{s}x3 images"),
                got: format!("{:?}", images.shape()),
            });
        }
        Ok(())
    }

    fn head_probs(&self, images: &Array4<f64>, head: impl Fn(&Self, &mut Tape, Var) -> Result<Var>) -> Result<Vec<f64>> {
        self.check_batch(images)?;
        let target = self.state.use_target_encoder;
        let mut out = Vec::with_capacity(images.shape()[0]);
        for start in (0..images.shape()[0]).step_by(INFER_CHUNK) {
            let end = (start + INFER_CHUNK).min(images.shape()[0]);
            let mut tape = Tape::new();
            let x = tape.constant(images.slice_axis(Axis(0), (start..end).into()).to_owned().into_dyn());
            let feats = self.encode(&mut tape, x, target)?;
            let z = head(self, &mut tape, feats)?;
            out.extend(tape.value(z).iter().map(|&v| sigmoid(v)));
        }
        Ok(out)
    }

    /// Per-frame success probabilities.
    pub fn classify(&self, batch: &FrameBatch) -> Result<Vec<f64>> {
        if self.cls.is_none() {
            return Err(self.capability("frame classification head (use predict_demo for sequence models)"));
        }
        self.head_probs(&batch.images, |m, t, f| m.cls_logits(t, f))
    }

    pub fn predict_timing(&self, batch: &FrameBatch) -> Result<Vec<f64>> {
        if self.timing.is_none() {
            return Err(self.capability("timing head"));
        }
        self.head_probs(&batch.images, |m, t, f| m.timing_logits(t, f))
    }

    pub fn discriminate_domain(&self, batch: &FrameBatch) -> Result<Vec<f64>> {
        if self.domain.is_none() {
            return Err(self.capability("domain head"));
        }
        self.head_probs(&batch.images, |m, t, f| m.domain_logits(t, f))
    }

    /// Inference features `[n, F]` for preprocessed images.
    pub fn features(&self, images: &[&ndarray::Array3<f32>]) -> Result<Array2<f64>> {
        let target = self.state.use_target_encoder;
        let mut rows = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFER_CHUNK) {
            let batch = frame_batch(chunk)?;
            self.check_batch(&batch)?;
            let mut tape = Tape::new();
            let x = tape.constant(batch.into_dyn());
            let f = self.encode(&mut tape, x, target)?;
            rows.push(tape.value(f).clone().into_dimensionality::<ndarray::Ix2>().expect("rank 2"));
        }
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        ndarray::concatenate(Axis(0), &views).map_err(|e| SclError::Shape {
            expected: "feature rows".into(),
            got: e.to_string(),
        })
    }

    /// One probability per frame. Sequence models predict each frame from
    /// the window ending at it, decoding autoregressively.
    pub fn predict_demo(&self, demo: &PreparedDemo) -> Result<DemoPrediction> {
        let imgs: Vec<&ndarray::Array3<f32>> = demo.images.iter().map(|a| a.as_ref()).collect();
        if let Some(seq) = &self.seq {
            let feats = self.features(&imgs)?;
            let windows = make_windows(&demo.labels, self.config.seq.window)?;
            let mut probs = Vec::with_capacity(demo.len());
            for chunk in windows.chunks(INFER_CHUNK) {
                let refs: Vec<_> = chunk.iter().collect();
                let batch = SeqBatch::from_windows(&feats, &refs);
                let p = seq.probabilities(&self.store, &batch, DecodeMode::Autoregressive)?;
                let last = batch.window_len() - 1;
                probs.extend(p.column(last).iter().copied());
            }
            return Ok(DemoPrediction { probs, timing: None });
        }
        let mut probs = Vec::with_capacity(demo.len());
        let mut timing = self.timing.as_ref().map(|_| Vec::with_capacity(demo.len()));
        for chunk in imgs.chunks(INFER_CHUNK) {
            let batch = FrameBatch::from_images(frame_batch(chunk)?);
            probs.extend(self.classify(&batch)?);
            if let Some(t) = timing.as_mut() {
                t.extend(self.predict_timing(&batch)?);
            }
        }
        Ok(DemoPrediction { probs, timing })
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::write_params(dir, &self.store)?;
        let file = ModelFile {
            format_version: checkpoint::FORMAT_VERSION,
            arch_id: self.arch(),
            seed: self.config.seed,
            config: self.config.clone(),
            state: self.state,
        };
        let path = dir.join(checkpoint::MODEL_FILE);
        fs::write(&path, serde_json::to_string_pretty(&file)?).map_err(|e| SclError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(checkpoint::MODEL_FILE);
        if !path.is_file() {
            return Err(SclError::ingestion(&path, "no checkpoint found"));
        }
        let text = fs::read_to_string(&path).map_err(|e| SclError::io(&path, e))?;
        let file: ModelFile = serde_json::from_str(&text).map_err(|e| SclError::Format(format!("{}: {e}", path.display())))?;
        if file.format_version != checkpoint::FORMAT_VERSION {
            return Err(SclError::Format(format!("unsupported model.json version {}", file.format_version)));
        }
        let mut model = build_model(&file.config)?;
        checkpoint::load_into(dir, &mut model.store)?;
        model.state = file.state;
        Ok(model)
    }
}
