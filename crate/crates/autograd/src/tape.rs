use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis, Ix2, Ix3, Ix4, IxDyn, Slice};

use crate::conv::{col2im, im2col, ConvGeometry};
use crate::params::{ParamId, ParamStore};
use crate::Array;

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        cols: Array2<f64>,
    },
    GridPool { input: Var, grid: usize },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow { input: Var, axis: usize, start: usize },
    MaskedSoftmax(Var),
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Array,
        inv_std: Array,
    },
    GradReverse(Var, f64),
    BceWithLogits {
        logits: Var,
        targets: Array,
        pos_weight: f64,
    },
    Mse { pred: Var, target: Array },
    SumAll(Var),
    MeanAll(Var),
}

struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

/// Record of one forward computation.
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Array>,
    leaves: BTreeMap<usize, Array>,
}

impl Gradients {
    /// Gradient for a parameter, or `None` if no gradient reached it.
    pub fn param(&self, id: ParamId) -> Option<&Array> {
        self.params.get(&id)
    }

    /// Gradient for an input created with [`Tape::input_with_grad`].
    pub fn input(&self, v: Var) -> Option<&Array> {
        self.leaves.get(&v.0)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Array)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// Sum of squared entries over all parameter gradients.
    pub fn squared_norm(&self) -> f64 {
        self.params.values().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|g| g.iter().all(|x| x.is_finite()))
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sums `grad` down to `shape` (numpy broadcasting rules, trailing aligned).
fn reduce_to_shape(grad: Array, shape: &[usize]) -> Array {
    if grad.shape() == shape {
        return grad;
    }
    let mut g = grad;
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (axis, &dim) in shape.iter().enumerate() {
        if dim == 1 && g.shape()[axis] != 1 {
            g = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    g
}

fn broadcast_to(value: &Array, shape: &[usize]) -> Array {
    value
        .broadcast(IxDyn(shape))
        .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", value.shape(), shape))
        .to_owned()
}

fn matmul2(a: &Array, b: &Array) -> Array {
    let a = a.view().into_dimensionality::<Ix2>().expect("matmul lhs must be 2-D");
    let b = b.view().into_dimensionality::<Ix2>().expect("matmul rhs must be 2-D");
    assert_eq!(a.ncols(), b.nrows(), "matmul inner dimensions differ");
    a.dot(&b).into_dyn()
}

fn batch_matmul(a: &Array, b: &Array, trans_a: bool, trans_b: bool) -> Array {
    let a = a.view().into_dimensionality::<Ix3>().expect("batch matmul lhs must be 3-D");
    let b = b.view().into_dimensionality::<Ix3>().expect("batch matmul rhs must be 3-D");
    assert_eq!(a.shape()[0], b.shape()[0], "batch sizes differ");
    let n = a.shape()[0];
    let mats: Vec<_> = (0..n)
        .map(|i| {
            let ai = a.index_axis(Axis(0), i);
            let bi = b.index_axis(Axis(0), i);
            let ai = if trans_a { ai.reversed_axes() } else { ai };
            let bi = if trans_b { bi.reversed_axes() } else { bi };
            ai.dot(&bi)
        })
        .collect();
    let views: Vec<_> = mats.iter().map(|m| m.view()).collect();
    ndarray::stack(Axis(0), &views).expect("uniform shapes").into_dyn()
}

fn last_axis(a: &Array) -> Axis {
    Axis(a.ndim() - 1)
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "node is not a scalar");
        *val.iter().next().unwrap()
    }

    /// Constant input; no gradient is computed for it.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Gradients::input`].
    pub fn input_with_grad(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Copies a parameter onto the tape. Frozen parameters act as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let trainable = store.is_trainable(id);
        self.push(store.get(id).clone(), Op::Param(id), trainable)
    }

    /// Constant copy of `v`'s value: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// `a + b` with `b` broadcast to the shape of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let value = self.value(a) + &broadcast_to(self.value(b), &shape);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    /// `a - b` with `b` broadcast to the shape of `a`.
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let value = self.value(a) - &broadcast_to(self.value(b), &shape);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    /// Elementwise `a * b` with `b` broadcast to the shape of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let value = self.value(a) * &broadcast_to(self.value(b), &shape);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, factor), ng)
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = matmul2(self.value(a), self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// Batched product `[B,n,k] x [B,k,m]`, or `[B,n,k] x [B,m,k]^T` with `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let value = batch_matmul(self.value(a), self.value(b), false, trans_b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::BatchMatMul { a, b, trans_b }, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(stable_sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    /// Square-kernel convolution of NCHW `input` with `[O, C, K, K]` weights.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Var {
        let x = self.value(input).view().into_dimensionality::<Ix4>().expect("conv input must be NCHW");
        let w = self.value(weight);
        assert_eq!(w.ndim(), 4, "conv weight must be [O, C, K, K]");
        let (out_c, in_c, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        assert_eq!(w.shape()[3], k, "conv kernel must be square");
        let (b, c, h, wd) = x.dim();
        assert_eq!(c, in_c, "conv input has {c} channels, weight expects {in_c}");
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv input smaller than kernel");
        let geom = ConvGeometry {
            batch: b,
            in_channels: c,
            in_h: h,
            in_w: wd,
            kernel: k,
            stride,
            pad,
        };
        let cols = im2col(x, &geom);
        let w2 = w.view().into_shape_with_order((out_c, in_c * k * k)).expect("contiguous weight");
        let mut out2 = w2.dot(&cols);
        if let Some(bias) = bias {
            let bv = self.value(bias);
            assert_eq!(bv.len(), out_c, "conv bias length mismatch");
            for (mut row, &bb) in out2.rows_mut().into_iter().zip(bv.iter()) {
                row += bb;
            }
        }
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let value = out2
            .into_shape_with_order((out_c, b, oh * ow))
            .expect("contiguous")
            .permuted_axes([1, 0, 2])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((b, out_c, oh, ow))
            .expect("contiguous")
            .into_dyn();
        let ng = self.ng(input) || self.ng(weight) || bias.is_some_and(|v| self.ng(v));
        self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            ng,
        )
    }

    /// Average pooling of `[B,C,H,W]` onto a `grid x grid` partition of the
    /// spatial plane, flattened to `[B, C*grid*grid]`. `grid = 1` is global
    /// average pooling.
    pub fn grid_pool(&mut self, input: Var, grid: usize) -> Var {
        let x = self.value(input).view().into_dimensionality::<Ix4>().expect("pool input must be NCHW");
        let (b, c, h, w) = x.dim();
        assert!(grid >= 1 && grid <= h && grid <= w, "pool grid larger than feature map");
        let mut out = Array2::<f64>::zeros((b, c * grid * grid));
        for bi in 0..b {
            for ci in 0..c {
                for gy in 0..grid {
                    let (y0, y1) = (gy * h / grid, (gy + 1) * h / grid);
                    for gx in 0..grid {
                        let (x0, x1) = (gx * w / grid, (gx + 1) * w / grid);
                        let cell = x.slice(s![bi, ci, y0..y1, x0..x1]);
                        out[[bi, (ci * grid + gy) * grid + gx]] = cell.sum() / cell.len() as f64;
                    }
                }
            }
        }
        let ng = self.ng(input);
        self.push(out.into_dyn(), Op::GridPool { input, grid }, ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self
            .value(a)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|_| panic!("cannot reshape {:?} to {:?}", self.shape(a), shape));
        let ng = self.ng(a);
        self.push(value, Op::Reshape(a), ng)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let value = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let ng = self.ng(a);
        self.push(value, Op::Permute(a, axes.to_vec()), ng)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat shapes must agree");
        let ng = parts.iter().any(|v| self.ng(*v));
        self.push(value, Op::Concat(parts.to_vec(), axis), ng)
    }

    /// Sub-range `start..start+len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let value = self
            .value(a)
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let ng = self.ng(a);
        self.push(value, Op::Narrow { input: a, axis, start }, ng)
    }

    /// Softmax over the last axis restricted to positions where `mask` is
    /// true; masked positions get weight exactly zero. A fully masked row
    /// yields all zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: &ndarray::ArrayD<bool>) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape(), mask.shape(), "mask shape mismatch");
        let mut out = Array::zeros(x.raw_dim());
        let ax = last_axis(x);
        for ((xl, ml), mut ol) in x
            .lanes(ax)
            .into_iter()
            .zip(mask.lanes(ax))
            .zip(out.lanes_mut(ax))
        {
            let max = xl
                .iter()
                .zip(ml.iter())
                .filter(|(_, &m)| m)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for ((o, &v), &m) in ol.iter_mut().zip(xl.iter()).zip(ml.iter()) {
                if m {
                    *o = (v - max).exp();
                    total += *o;
                }
            }
            ol.mapv_inplace(|v| v / total);
        }
        let ng = self.ng(a);
        self.push(out, Op::MaskedSoftmax(a), ng)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let x = self.value(a);
        let ax = last_axis(x);
        let d = x.shape()[ax.0] as f64;
        let mean = x.sum_axis(ax).mapv(|v| v / d).insert_axis(ax);
        let centered = x - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(ax).mapv(|v| v / d).insert_axis(ax);
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let xhat = &centered * &inv_std;
        let shape = x.shape().to_vec();
        let value = &xhat * &broadcast_to(self.value(gamma), &shape)
            + &broadcast_to(self.value(beta), &shape);
        let ng = self.ng(a) || self.ng(gamma) || self.ng(beta);
        self.push(
            value,
            Op::LayerNorm {
                input: a,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Identity in the forward pass; multiplies the incoming gradient by
    /// `-lambda` in the backward pass.
    pub fn grad_reverse(&mut self, a: Var, lambda: f64) -> Var {
        let value = self.value(a).clone();
        let ng = self.ng(a);
        self.push(value, Op::GradReverse(a, lambda), ng)
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`,
    /// with positive examples weighted by `pos_weight`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Array, pos_weight: f64) -> Var {
        let z = self.value(logits);
        assert_eq!(z.shape(), targets.shape(), "bce target shape mismatch");
        let n = z.len() as f64;
        let total: f64 = z
            .iter()
            .zip(targets.iter())
            .map(|(&z, &y)| {
                let c = 1.0 + (pos_weight - 1.0) * y;
                let softplus_neg = (-z).max(0.0) + (-z.abs()).exp().ln_1p();
                (1.0 - y) * z + c * softplus_neg
            })
            .sum();
        let ng = self.ng(logits);
        self.push(
            ndarray::arr0(total / n).into_dyn(),
            Op::BceWithLogits {
                logits,
                targets,
                pos_weight,
            },
            ng,
        )
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: Array) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "mse target shape mismatch");
        let n = p.len() as f64;
        let total: f64 = p.iter().zip(target.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        let ng = self.ng(pred);
        self.push(ndarray::arr0(total / n).into_dyn(), Op::Mse { pred, target }, ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = ndarray::arr0(self.value(a).sum()).into_dyn();
        let ng = self.ng(a);
        self.push(value, Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let value = ndarray::arr0(self.value(a).mean().expect("non-empty")).into_dyn();
        let ng = self.ng(a);
        self.push(value, Op::MeanAll(a), ng)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Array>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array::ones(self.value(loss).raw_dim()));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(idx, g);
                }
                Op::Param(id) => {
                    match out.params.get_mut(id) {
                        Some(acc) => *acc += &g,
                        None => {
                            out.params.insert(*id, g);
                        }
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*b) {
                        let gb = reduce_to_shape(g.clone(), self.shape(*b));
                        self.accumulate(&mut grads, *b, gb);
                    }
                    self.accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    if self.ng(*b) {
                        let gb = reduce_to_shape(-&g, self.shape(*b));
                        self.accumulate(&mut grads, *b, gb);
                    }
                    self.accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let shape = self.shape(*a).to_vec();
                    if self.ng(*b) {
                        let gb = reduce_to_shape(&g * self.value(*a), self.shape(*b));
                        self.accumulate(&mut grads, *b, gb);
                    }
                    if self.ng(*a) {
                        let ga = &g * &broadcast_to(self.value(*b), &shape);
                        self.accumulate(&mut grads, *a, ga);
                    }
                }
                Op::Scale(a, f) => self.accumulate(&mut grads, *a, g * *f),
                Op::MatMul(a, b) => {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    if self.ng(*a) {
                        let bv = self.value(*b).view().into_dimensionality::<Ix2>().unwrap();
                        self.accumulate(&mut grads, *a, g2.dot(&bv.t()).into_dyn());
                    }
                    if self.ng(*b) {
                        let av = self.value(*a).view().into_dimensionality::<Ix2>().unwrap();
                        self.accumulate(&mut grads, *b, av.t().dot(&g2).into_dyn());
                    }
                }
                Op::BatchMatMul { a, b, trans_b } => {
                    if self.ng(*a) {
                        let ga = batch_matmul(&g, self.value(*b), false, !trans_b);
                        self.accumulate(&mut grads, *a, ga);
                    }
                    if self.ng(*b) {
                        let gb = if *trans_b {
                            batch_matmul(&g, self.value(*a), true, false)
                        } else {
                            batch_matmul(self.value(*a), &g, true, false)
                        };
                        self.accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(&node.value, |gi, &y| {
                        if y <= 0.0 {
                            *gi = 0.0
                        }
                    });
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(&node.value, |gi, &y| *gi *= y * (1.0 - y));
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(&node.value, |gi, &y| *gi *= 1.0 - y * y);
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                    cols,
                } => {
                    let w = self.value(*weight);
                    let out_c = w.shape()[0];
                    let hw = geom.out_h() * geom.out_w();
                    let g2 = g
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order((geom.batch, out_c, hw))
                        .expect("contiguous")
                        .permuted_axes([1, 0, 2])
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order((out_c, geom.batch * hw))
                        .expect("contiguous");
                    if let Some(bias) = bias {
                        if self.ng(*bias) {
                            self.accumulate(&mut grads, *bias, g2.sum_axis(Axis(1)).into_dyn());
                        }
                    }
                    if self.ng(*weight) {
                        let gw = g2.dot(&cols.t()).into_dyn();
                        let gw = gw.into_shape_with_order(w.raw_dim()).expect("weight shape");
                        self.accumulate(&mut grads, *weight, gw);
                    }
                    if self.ng(*input) {
                        let w2 = w
                            .view()
                            .into_shape_with_order((out_c, cols.nrows()))
                            .expect("contiguous weight");
                        let gcols = w2.t().dot(&g2);
                        self.accumulate(&mut grads, *input, col2im(&gcols, geom).into_dyn());
                    }
                }
                Op::GridPool { input, grid } => {
                    let shape = self.shape(*input).to_vec();
                    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                    let grid = *grid;
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let mut gi = ndarray::Array4::<f64>::zeros((b, c, h, w));
                    for bi in 0..b {
                        for ci in 0..c {
                            for gy in 0..grid {
                                let (y0, y1) = (gy * h / grid, (gy + 1) * h / grid);
                                for gx in 0..grid {
                                    let (x0, x1) = (gx * w / grid, (gx + 1) * w / grid);
                                    let n = ((y1 - y0) * (x1 - x0)) as f64;
                                    let v = g2[[bi, (ci * grid + gy) * grid + gx]] / n;
                                    gi.slice_mut(s![bi, ci, y0..y1, x0..x1]).fill(v);
                                }
                            }
                        }
                    }
                    self.accumulate(&mut grads, *input, gi.into_dyn());
                }
                Op::Reshape(a) => {
                    let shape = self.value(*a).raw_dim();
                    let ga = g
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(shape)
                        .expect("reshape grad");
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Permute(a, axes) => {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inverse[ax] = i;
                    }
                    let ga = g.permuted_axes(IxDyn(&inverse)).as_standard_layout().into_owned();
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Concat(parts, axis) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.shape(*p)[*axis];
                        if self.ng(*p) {
                            let gp = g
                                .slice_axis(Axis(*axis), Slice::from(offset..offset + len))
                                .to_owned();
                            self.accumulate(&mut grads, *p, gp);
                        }
                        offset += len;
                    }
                }
                Op::Narrow { input, axis, start } => {
                    let mut gi = Array::zeros(self.value(*input).raw_dim());
                    let len = g.shape()[*axis];
                    gi.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + len))
                        .assign(&g);
                    self.accumulate(&mut grads, *input, gi);
                }
                Op::MaskedSoftmax(a) => {
                    let y = &node.value;
                    let ax = last_axis(y);
                    let dot = (&g * y).sum_axis(ax).insert_axis(ax);
                    let ga = y * &(&g - &dot);
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let ax = last_axis(xhat);
                    let d = xhat.shape()[ax.0];
                    let lead: usize = xhat.len() / d;
                    if self.ng(*gamma) {
                        let gg = (&g * xhat)
                            .into_shape_with_order((lead, d))
                            .expect("contiguous")
                            .sum_axis(Axis(0))
                            .into_dyn();
                        self.accumulate(&mut grads, *gamma, gg);
                    }
                    if self.ng(*beta) {
                        let gb = g
                            .clone()
                            .into_shape_with_order((lead, d))
                            .expect("contiguous")
                            .sum_axis(Axis(0))
                            .into_dyn();
                        self.accumulate(&mut grads, *beta, gb);
                    }
                    if self.ng(*input) {
                        let gamma_b = broadcast_to(self.value(*gamma), xhat.shape());
                        let gxhat = &g * &gamma_b;
                        let sum_g = gxhat.sum_axis(ax).insert_axis(ax);
                        let sum_gx = (&gxhat * xhat).sum_axis(ax).insert_axis(ax);
                        let df = d as f64;
                        let gi = (&gxhat * df - &sum_g - &(xhat * &sum_gx)) * &(inv_std / df);
                        self.accumulate(&mut grads, *input, gi);
                    }
                }
                Op::GradReverse(a, lambda) => {
                    self.accumulate(&mut grads, *a, g * -*lambda);
                }
                Op::BceWithLogits {
                    logits,
                    targets,
                    pos_weight,
                } => {
                    let upstream = *g.iter().next().unwrap();
                    let z = self.value(*logits);
                    let n = z.len() as f64;
                    let mut gz = Array::zeros(z.raw_dim());
                    for ((gi, &zi), &y) in gz.iter_mut().zip(z.iter()).zip(targets.iter()) {
                        let c = 1.0 + (pos_weight - 1.0) * y;
                        *gi = upstream * ((1.0 - y) - c * stable_sigmoid(-zi)) / n;
                    }
                    self.accumulate(&mut grads, *logits, gz);
                }
                Op::Mse { pred, target } => {
                    let upstream = *g.iter().next().unwrap();
                    let n = target.len() as f64;
                    let gp = (self.value(*pred) - target) * (2.0 * upstream / n);
                    self.accumulate(&mut grads, *pred, gp);
                }
                Op::SumAll(a) => {
                    let upstream = *g.iter().next().unwrap();
                    let ga = Array::from_elem(self.value(*a).raw_dim(), upstream);
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::MeanAll(a) => {
                    let upstream = *g.iter().next().unwrap();
                    let n = self.value(*a).len() as f64;
                    let ga = Array::from_elem(self.value(*a).raw_dim(), upstream / n);
                    self.accumulate(&mut grads, *a, ga);
                }
            }
        }
        out
    }

    fn accumulate(&self, grads: &mut [Option<Array>], v: Var, g: Array) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }
}
