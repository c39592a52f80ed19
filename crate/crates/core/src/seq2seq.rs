//! Sequence classifiers over windows of backbone features: an LSTM
//! encoder-decoder with additive attention and a causal transformer decoder.
//! Both emit one success logit per window position.

use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayD, Axis, Ix2};
use rand::Rng;
use scl_autograd::nn::{init_array, Init, LayerNorm, Linear, LstmCell};
use scl_autograd::{ParamId, ParamStore, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::dataset::{Window, WINDOW_LEN};
use crate::error::{Result, SclError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeqConfig {
    pub window: usize,
    /// Recurrent width of the attention model.
    pub hidden: usize,
    /// Width of the additive attention scorer.
    pub attn_dim: usize,
    /// Transformer model width.
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
}

impl Default for SeqConfig {
    fn default() -> Self {
        Self {
            window: WINDOW_LEN,
            hidden: 128,
            attn_dim: 128,
            model_dim: 128,
            layers: 2,
            heads: 4,
            ffn_dim: 256,
        }
    }
}

impl SeqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.hidden == 0 || self.attn_dim == 0 || self.layers == 0 || self.heads == 0 {
            return Err(SclError::Config("sequence model sizes must be positive".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(SclError::Config(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// How the attention decoder receives previous labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// Ground-truth previous labels (training).
    TeacherForcing,
    /// Thresholded previous predictions, starting from label 0 (inference).
    Autoregressive,
}

impl FromStr for DecodeMode {
    type Err = SclError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher_forcing" => Ok(Self::TeacherForcing),
            "autoregressive" => Ok(Self::Autoregressive),
            other => Err(SclError::Validation(format!(
                "unknown decode mode `{other}`; expected teacher_forcing or autoregressive"
            ))),
        }
    }
}

/// A batch of feature windows.
#[derive(Debug, Clone)]
pub struct SeqBatch {
    /// `[B, T, F]`.
    pub features: Array3<f64>,
    /// `[B, T]`, true at left-padding positions.
    pub pad_mask: Array2<bool>,
    /// `[B, T]` labels in {0, 1}.
    pub labels: Array2<f64>,
}

impl SeqBatch {
    /// Gathers windows over one demonstration's per-frame features `[j, F]`.
    pub fn from_windows(features: &Array2<f64>, windows: &[&Window]) -> Self {
        let t = windows.first().map_or(0, |w| w.frame_indices.len());
        let f = features.ncols();
        let mut feats = Array3::zeros((windows.len(), t, f));
        let mut pad = Array2::from_elem((windows.len(), t), false);
        let mut labels = Array2::zeros((windows.len(), t));
        for (b, w) in windows.iter().enumerate() {
            for (p, &fi) in w.frame_indices.iter().enumerate() {
                feats.index_axis_mut(Axis(0), b).row_mut(p).assign(&features.row(fi));
                pad[[b, p]] = w.pad_mask[p];
                labels[[b, p]] = f64::from(w.labels[p]);
            }
        }
        Self {
            features: feats,
            pad_mask: pad,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn window_len(&self) -> usize {
        self.features.shape()[1]
    }
}

/// Logits plus the attention weights used to produce them.
pub struct SeqOutput {
    /// `[B, T]`.
    pub logits: Var,
    /// Attention weights, one node per decode step (attention model, each
    /// `[B, T]`) or per layer and kind (transformer, each `[B*heads, T, T]`,
    /// self-attention then cross-attention).
    pub attention: Vec<Var>,
}

/// LSTM encoder and LSTM decoder with additive attention. The decoder input
/// at each step is the one-hot previous label and the attention context.
#[derive(Debug, Clone)]
pub struct AttnEncoderDecoder {
    pub hidden: usize,
    encoder: LstmCell,
    decoder: LstmCell,
    w_query: Linear,
    w_key: Linear,
    scorer: Linear,
    out: Linear,
}

impl AttnEncoderDecoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, feature_dim: usize, cfg: &SeqConfig, rng: &mut R) -> Self {
        let h = cfg.hidden;
        Self {
            hidden: h,
            encoder: LstmCell::new(store, &format!("{prefix}.encoder"), feature_dim, h, rng),
            decoder: LstmCell::new(store, &format!("{prefix}.decoder"), 2 + h, h, rng),
            w_query: Linear::new(store, &format!("{prefix}.attn_query"), h, cfg.attn_dim, Init::XavierUniform, rng),
            w_key: Linear::new(store, &format!("{prefix}.attn_key"), h, cfg.attn_dim, Init::XavierUniform, rng),
            scorer: Linear::new(store, &format!("{prefix}.attn_score"), cfg.attn_dim, 1, Init::XavierUniform, rng),
            out: Linear::new(store, &format!("{prefix}.out"), 2 * h, 1, Init::XavierUniform, rng),
        }
    }

    pub fn output_layer(&self) -> &Linear {
        &self.out
    }

    /// Encoder states `[B, T, H]` and the final `(h, c)`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, feats: Var) -> (Var, Var, Var) {
        let shape = tape.shape(feats).to_vec();
        let (b, t, f) = (shape[0], shape[1], shape[2]);
        let mut h = tape.constant(ArrayD::zeros(vec![b, self.hidden]));
        let mut c = tape.constant(ArrayD::zeros(vec![b, self.hidden]));
        let mut states = Vec::with_capacity(t);
        for step in 0..t {
            let x = tape.narrow(feats, 1, step, 1);
            let x = tape.reshape(x, &[b, f]);
            (h, c) = self.encoder.step(tape, store, x, h, c);
            states.push(tape.reshape(h, &[b, 1, self.hidden]));
        }
        (tape.concat(&states, 1), h, c)
    }

    fn attend_projected(&self, tape: &mut Tape, store: &ParamStore, query: Var, keys: Var, states: Var, valid: &ArrayD<bool>) -> (Var, Var) {
        let shape = tape.shape(keys).to_vec();
        let (b, t, a) = (shape[0], shape[1], shape[2]);
        let q = self.w_query.forward(tape, store, query);
        let q = tape.reshape(q, &[b, 1, a]);
        let e = tape.add(keys, q);
        let e = tape.tanh(e);
        let scores = self.scorer.forward(tape, store, e);
        let scores = tape.reshape(scores, &[b, t]);
        let weights = tape.masked_softmax(scores, valid);
        let w3 = tape.reshape(weights, &[b, 1, t]);
        let ctx = tape.batch_matmul(w3, states, false);
        (tape.reshape(ctx, &[b, self.hidden]), weights)
    }

    /// Additive attention of `query [B, H]` over `states [B, T, H]`,
    /// restricted to positions where `valid` is true. Returns the context
    /// `[B, H]` and the weights `[B, T]`.
    pub fn attend(&self, tape: &mut Tape, store: &ParamStore, query: Var, states: Var, valid: &Array2<bool>) -> Result<(Var, Var)> {
        if valid.rows().into_iter().any(|r| !r.iter().any(|&v| v)) {
            return Err(SclError::Validation("attention over a fully masked window".into()));
        }
        let keys = self.w_key.forward(tape, store, states);
        Ok(self.attend_projected(tape, store, query, keys, states, &valid.clone().into_dyn()))
    }

    pub fn decode(&self, tape: &mut Tape, store: &ParamStore, batch_feats: Var, pad: &Array2<bool>, labels: Option<&Array2<f64>>, mode: DecodeMode) -> Result<SeqOutput> {
        let valid = pad.mapv(|p| !p);
        if valid.rows().into_iter().any(|r| !r.iter().any(|&v| v)) {
            return Err(SclError::Validation("attention over a fully masked window".into()));
        }
        let valid = valid.into_dyn();
        let shape = tape.shape(batch_feats).to_vec();
        let (b, t) = (shape[0], shape[1]);
        if mode == DecodeMode::TeacherForcing && labels.is_none() {
            return Err(SclError::Validation("teacher forcing needs the label window".into()));
        }
        let (states, mut h, mut c) = self.encode(tape, store, batch_feats);
        let keys = self.w_key.forward(tape, store, states);
        let mut prev = vec![0u8; b];
        let mut logits = Vec::with_capacity(t);
        let mut attention = Vec::with_capacity(t);
        for step in 0..t {
            if step > 0 {
                prev = match mode {
                    DecodeMode::TeacherForcing => {
                        let l = labels.expect("checked above");
                        (0..b).map(|i| u8::from(l[[i, step - 1]] >= 0.5)).collect()
                    }
                    // logit >= 0 is exactly sigmoid >= 0.5
                    DecodeMode::Autoregressive => {
                        let last = tape.value(*logits.last().expect("previous step"));
                        last.iter().map(|&z| u8::from(z >= 0.0)).collect()
                    }
                };
            }
            let mut onehot = ArrayD::zeros(vec![b, 2]);
            for (i, &p) in prev.iter().enumerate() {
                onehot[[i, usize::from(p)]] = 1.0;
            }
            let onehot = tape.constant(onehot);
            let (ctx, w) = self.attend_projected(tape, store, h, keys, states, &valid);
            attention.push(w);
            let input = tape.concat(&[onehot, ctx], 1);
            (h, c) = self.decoder.step(tape, store, input, h, c);
            let hc = tape.concat(&[h, ctx], 1);
            logits.push(self.out.forward(tape, store, hc));
        }
        Ok(SeqOutput {
            logits: tape.concat(&logits, 1),
            attention,
        })
    }
}

#[derive(Debug, Clone)]
struct MultiHead {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHead {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        let lin = |store: &mut ParamStore, n: &str, rng: &mut R| Linear::new(store, &format!("{prefix}.{n}"), d, d, Init::XavierUniform, rng);
        Self {
            q: lin(store, "q", rng),
            k: lin(store, "k", rng),
            v: lin(store, "v", rng),
            o: lin(store, "o", rng),
            heads,
        }
    }

    fn split(tape: &mut Tape, x: Var, b: usize, t: usize, heads: usize, dh: usize) -> Var {
        let x = tape.reshape(x, &[b, t, heads, dh]);
        let x = tape.permute(x, &[0, 2, 1, 3]);
        tape.reshape(x, &[b * heads, t, dh])
    }

    /// Returns the output `[B, T, D]` and weights `[B*heads, T, T]`.
    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, memory: Var, mask: &ArrayD<bool>) -> (Var, Var) {
        let shape = tape.shape(x).to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let dh = d / self.heads;
        let q = self.q.forward(tape, store, x);
        let k = self.k.forward(tape, store, memory);
        let v = self.v.forward(tape, store, memory);
        let q = Self::split(tape, q, b, t, self.heads, dh);
        let k = Self::split(tape, k, b, t, self.heads, dh);
        let v = Self::split(tape, v, b, t, self.heads, dh);
        let scores = tape.batch_matmul(q, k, true);
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let weights = tape.masked_softmax(scores, mask);
        let ctx = tape.batch_matmul(weights, v, false);
        let ctx = tape.reshape(ctx, &[b, self.heads, t, dh]);
        let ctx = tape.permute(ctx, &[0, 2, 1, 3]);
        let ctx = tape.reshape(ctx, &[b, t, d]);
        (self.o.forward(tape, store, ctx), weights)
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: MultiHead,
    ln1: LayerNorm,
    cross_attn: MultiHead,
    ln2: LayerNorm,
    ffn1: Linear,
    ffn2: Linear,
    ln3: LayerNorm,
}

/// Post-norm transformer decoder: causal self-attention over the projected
/// feature window and causal cross-attention into it.
#[derive(Debug, Clone)]
pub struct TransformerDecoder {
    pub model_dim: usize,
    pub heads: usize,
    in_proj: Linear,
    mem_proj: Linear,
    pos: ParamId,
    layers: Vec<DecoderLayer>,
    out: Linear,
}

impl TransformerDecoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, feature_dim: usize, cfg: &SeqConfig, rng: &mut R) -> Self {
        let d = cfg.model_dim;
        let in_proj = Linear::new(store, &format!("{prefix}.in_proj"), feature_dim, d, Init::XavierUniform, rng);
        let mem_proj = Linear::new(store, &format!("{prefix}.mem_proj"), feature_dim, d, Init::XavierUniform, rng);
        let pos = store.add(
            format!("{prefix}.pos"),
            init_array(&[cfg.window, d], cfg.window, d, Init::XavierUniform, rng),
        );
        let layers = (0..cfg.layers)
            .map(|i| {
                let p = format!("{prefix}.layer{i}");
                DecoderLayer {
                    self_attn: MultiHead::new(store, &format!("{p}.self_attn"), d, cfg.heads, rng),
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), d),
                    cross_attn: MultiHead::new(store, &format!("{p}.cross_attn"), d, cfg.heads, rng),
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), d),
                    ffn1: Linear::new(store, &format!("{p}.ffn1"), d, cfg.ffn_dim, Init::HeUniform, rng),
                    ffn2: Linear::new(store, &format!("{p}.ffn2"), cfg.ffn_dim, d, Init::XavierUniform, rng),
                    ln3: LayerNorm::new(store, &format!("{p}.ln3"), d),
                }
            })
            .collect();
        let out = Linear::new(store, &format!("{prefix}.out"), d, 1, Init::XavierUniform, rng);
        Self {
            model_dim: d,
            heads: cfg.heads,
            in_proj,
            mem_proj,
            pos,
            layers,
            out,
        }
    }

    pub fn output_layer(&self) -> &Linear {
        &self.out
    }

    /// Query `q` may see key `k` iff `k <= q` and `k` is a real frame (a
    /// position may always see itself).
    pub fn causal_mask(pad: &Array2<bool>, heads: usize) -> ArrayD<bool> {
        let (b, t) = pad.dim();
        let mut mask = ArrayD::from_elem(vec![b * heads, t, t], false);
        for bi in 0..b {
            for h in 0..heads {
                for q in 0..t {
                    for k in 0..=q {
                        mask[[bi * heads + h, q, k]] = k == q || !pad[[bi, k]];
                    }
                }
            }
        }
        mask
    }

    pub fn decode(&self, tape: &mut Tape, store: &ParamStore, feats: Var, pad: &Array2<bool>) -> Result<SeqOutput> {
        let shape = tape.shape(feats).to_vec();
        let (b, t) = (shape[0], shape[1]);
        let window = store.get(self.pos).shape()[0];
        if t != window {
            return Err(SclError::Shape {
                expected: format!("window of {window} positions"),
                got: format!("{t}"),
            });
        }
        let mask = Self::causal_mask(pad, self.heads);
        let pos = tape.param(store, self.pos);
        let x = self.in_proj.forward(tape, store, feats);
        let mut x = tape.add(x, pos);
        let m = self.mem_proj.forward(tape, store, feats);
        let memory = tape.add(m, pos);
        let mut attention = Vec::new();
        for layer in &self.layers {
            let (a, w) = layer.self_attn.forward(tape, store, x, x, &mask);
            attention.push(w);
            let r = tape.add(x, a);
            x = layer.ln1.forward(tape, store, r);
            let (a, w) = layer.cross_attn.forward(tape, store, x, memory, &mask);
            attention.push(w);
            let r = tape.add(x, a);
            x = layer.ln2.forward(tape, store, r);
            let f = layer.ffn1.forward(tape, store, x);
            let f = tape.relu(f);
            let f = layer.ffn2.forward(tape, store, f);
            let r = tape.add(x, f);
            x = layer.ln3.forward(tape, store, r);
        }
        let logits = self.out.forward(tape, store, x);
        Ok(SeqOutput {
            logits: tape.reshape(logits, &[b, t]),
            attention,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqKind {
    Attention,
    Transformer,
}

/// Sequence head of the ATTN_RNN and TRANSFORMER architectures.
#[derive(Debug, Clone)]
pub enum SeqHead {
    Attn(AttnEncoderDecoder),
    Transformer(TransformerDecoder),
}

impl SeqHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, kind: SeqKind, feature_dim: usize, cfg: &SeqConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Ok(match kind {
            SeqKind::Attention => Self::Attn(AttnEncoderDecoder::new(store, prefix, feature_dim, cfg, rng)),
            SeqKind::Transformer => Self::Transformer(TransformerDecoder::new(store, prefix, feature_dim, cfg, rng)),
        })
    }

    pub fn output_layer(&self) -> &Linear {
        match self {
            Self::Attn(a) => a.output_layer(),
            Self::Transformer(t) => t.output_layer(),
        }
    }

    /// Per-position logits `[B, T]` for a window batch. The transformer has
    /// no label input, so `mode` only affects the attention model.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, batch: &SeqBatch, mode: DecodeMode) -> Result<SeqOutput> {
        let feats = tape.constant(batch.features.clone().into_dyn());
        self.forward_var(tape, store, feats, &batch.pad_mask, Some(&batch.labels), mode)
    }

    pub fn forward_var(&self, tape: &mut Tape, store: &ParamStore, feats: Var, pad: &Array2<bool>, labels: Option<&Array2<f64>>, mode: DecodeMode) -> Result<SeqOutput> {
        match self {
            Self::Attn(a) => a.decode(tape, store, feats, pad, labels, mode),
            Self::Transformer(t) => t.decode(tape, store, feats, pad),
        }
    }

    /// Success probabilities `[B, T]` without building a training graph.
    pub fn probabilities(&self, store: &ParamStore, batch: &SeqBatch, mode: DecodeMode) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, store, batch, mode)?;
        Ok(tape
            .value(out.logits)
            .mapv(sigmoid)
            .into_dimensionality::<Ix2>()
            .expect("rank-2 logits"))
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
