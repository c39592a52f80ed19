//! Parameterized building blocks over a [`Tape`].
//!
//! Layers hold only [`ParamId`]s; values stay in the [`ParamStore`], so a
//! layer can be evaluated against any store with the same layout.

use ndarray::ArrayD;
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::{ParamId, ParamStore, Tape, Var};

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`, suited to rectified layers.
    HeUniform,
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    XavierUniform,
    Zeros,
}

pub fn init_array<R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    init: Init,
    rng: &mut R,
) -> ArrayD<f64> {
    let bound = match init {
        Init::Zeros => return ArrayD::zeros(shape.to_vec()),
        Init::HeUniform => (6.0 / fan_in as f64).sqrt(),
        Init::XavierUniform => (6.0 / (fan_in + fan_out) as f64).sqrt(),
    };
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    ArrayD::from_shape_vec(shape.to_vec(), data).expect("shape matches data")
}

/// Affine map on the last axis: `x W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = init_array(&[in_dim, out_dim], in_dim, out_dim, init, rng);
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), ArrayD::zeros(vec![out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Accepts `[.., in_dim]` input of any rank ≥ 2.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let shape = tape.shape(x).to_vec();
        assert_eq!(
            *shape.last().expect("rank >= 1"),
            self.in_dim,
            "linear layer expects last dim {}",
            self.in_dim
        );
        let lead: usize = shape[..shape.len() - 1].iter().product();
        let flat = if shape.len() == 2 {
            x
        } else {
            tape.reshape(x, &[lead, self.in_dim])
        };
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(flat, w);
        let y = tape.add(y, b);
        if shape.len() == 2 {
            y
        } else {
            let mut out_shape = shape;
            *out_shape.last_mut().unwrap() = self.out_dim;
            tape.reshape(y, &out_shape)
        }
    }
}

/// Square-kernel convolution with bias.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let fan_out = out_channels * kernel * kernel;
        let w = init_array(
            &[out_channels, in_channels, kernel, kernel],
            fan_in,
            fan_out,
            Init::HeUniform,
            rng,
        );
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), ArrayD::zeros(vec![out_channels]));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), ArrayD::ones(vec![dim]));
        let beta = store.add(format!("{name}.beta"), ArrayD::zeros(vec![dim]));
        Self { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, 1e-5)
    }
}

/// Long short-term memory cell with gate order input, forget, cell, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let wi = init_array(&[in_dim, 4 * hidden], in_dim, hidden, Init::XavierUniform, rng);
        let wh = init_array(&[hidden, 4 * hidden], hidden, hidden, Init::XavierUniform, rng);
        // forget-gate bias starts at 1 so early gradients pass through time
        let mut b = ArrayD::zeros(vec![4 * hidden]);
        b.slice_axis_mut(ndarray::Axis(0), ndarray::Slice::from(hidden..2 * hidden))
            .fill(1.0);
        Self {
            w_input: store.add(format!("{name}.w_input"), wi),
            w_hidden: store.add(format!("{name}.w_hidden"), wh),
            bias: store.add(format!("{name}.bias"), b),
            in_dim,
            hidden,
        }
    }

    /// One step: `(x [B,in], h [B,H], c [B,H]) -> (h', c')`.
    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var, c: Var) -> (Var, Var) {
        let wi = tape.param(store, self.w_input);
        let wh = tape.param(store, self.w_hidden);
        let b = tape.param(store, self.bias);
        let xi = tape.matmul(x, wi);
        let hh = tape.matmul(h, wh);
        let z = tape.add(xi, hh);
        let z = tape.add(z, b);
        let hd = self.hidden;
        let i = tape.narrow(z, 1, 0, hd);
        let f = tape.narrow(z, 1, hd, hd);
        let g = tape.narrow(z, 1, 2 * hd, hd);
        let o = tape.narrow(z, 1, 3 * hd, hd);
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let fc = tape.mul(f, c);
        let ig = tape.mul(i, g);
        let c_next = tape.add(fc, ig);
        let tc = tape.tanh(c_next);
        let h_next = tape.mul(o, tc);
        (h_next, c_next)
    }
}
