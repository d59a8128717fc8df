//! A small reverse-mode tape over [`Tensor`] values.
//!
//! A forward pass records nodes on a [`Tape`]; [`Tape::backward`] walks them in
//! reverse and returns gradients for every parameter that was read. Gradients
//! are only propagated through nodes that depend on a parameter.

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, ConvGeometry, Tensor};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Normalization behavior of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics updates are recorded.
    Train,
    /// Running statistics; outputs are a pure function of parameters and input.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Parameter ids of one batch-normalization layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

/// Running-statistics update produced by a training-mode normalization.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub params: BnParams,
    pub batch_mean: Vec<f32>,
    pub batch_var: Vec<f32>,
}

impl BnUpdate {
    pub fn apply(&self, store: &mut ParamStore) {
        let rm = store.get_mut(self.params.running_mean).data_mut();
        for (r, m) in rm.iter_mut().zip(&self.batch_mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        let rv = store.get_mut(self.params.running_var).data_mut();
        for (r, v) in rv.iter_mut().zip(&self.batch_var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
}

enum Op {
    Leaf,
    Param,
    Conv {
        x: Var,
        w: Var,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    RowScale {
        x: Var,
        s: Var,
    },
    Scale(Var, f32),
    Sigmoid(Var),
    Tanh(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    GlobalAvgPool(Var),
    PadShortcut(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
    KlDistill {
        student: Var,
        teacher_probs: Tensor,
        student_probs: Tensor,
        tau: f32,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients keyed by parameter.
#[derive(Debug, Default)]
pub struct Gradients {
    by_param: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.by_param.iter()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    bn_updates: Vec<BnUpdate>,
    /// Gradient of the most recent `backward` with respect to every node.
    node_grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Input that carries no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is recorded (see [`Tape::grad_of`]).
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Param, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs[1], ws[1], "conv input channels {} vs weight {}", xs[1], ws[1]);
        let geom = ConvGeometry {
            in_channels: ws[1],
            out_channels: ws[0],
            kernel: ws[2],
            stride,
            pad,
            in_h: xs[2],
            in_w: xs[3],
        };
        let out = tensor::conv2d_forward(self.value(x), self.value(w), &geom);
        let rg = self.rg(x) || self.rg(w);
        self.push(out, Op::Conv { x, w, geom }, rg)
    }

    pub fn batch_norm(&mut self, store: &ParamStore, x: Var, bn: BnParams, mode: Mode) -> Var {
        let gamma = self.param(store, bn.gamma);
        let beta = self.param(store, bn.beta);
        let xv = self.value(x);
        let (mean, inv_std, batch_stats) = match mode {
            Mode::Train => {
                let (mean, var) = tensor::channel_moments(xv);
                let n: usize = xv.shape()[0] * xv.shape()[2..].iter().product::<usize>();
                let unbiased = if n > 1 {
                    var.iter().map(|v| v * n as f32 / (n - 1) as f32).collect()
                } else {
                    var.clone()
                };
                self.bn_updates.push(BnUpdate {
                    params: bn,
                    batch_mean: mean.clone(),
                    batch_var: unbiased,
                });
                let inv: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                (mean, inv, true)
            }
            Mode::Eval => {
                let mean = store.get(bn.running_mean).data().to_vec();
                let inv = store
                    .get(bn.running_var)
                    .data()
                    .iter()
                    .map(|v| 1.0 / (v + BN_EPS).sqrt())
                    .collect();
                (mean, inv, false)
            }
        };
        let shift: Vec<f32> = mean.iter().zip(&inv_std).map(|(m, s)| -m * s).collect();
        let xv = self.value(x);
        let xhat = tensor::channel_affine(xv, &inv_std, &shift);
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let out = tensor::channel_affine(&xhat, &g, &b);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |p, q| p + q);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |p, q| p - q);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |p, q| p * q);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Multiplies each batch entry of `x` by the matching entry of `s` (`[B, 1]`).
    pub fn row_scale(&mut self, x: Var, s: Var) -> Var {
        let xv = self.value(x);
        let sv = self.value(s);
        assert_eq!(sv.len(), xv.batch(), "row_scale needs one scalar per row");
        let row = xv.row_len();
        let mut out = xv.clone();
        for (chunk, &k) in out.data_mut().chunks_mut(row).zip(sv.data()) {
            chunk.iter_mut().for_each(|v| *v *= k);
        }
        let rg = self.rg(x) || self.rg(s);
        self.push(out, Op::RowScale { x, s }, rg)
    }

    pub fn scale(&mut self, x: Var, k: f32) -> Var {
        let out = self.value(x).map(|v| v * k);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, k), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(tensor::sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f32::tanh);
        let rg = self.rg(x);
        self.push(out, Op::Tanh(x), rg)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let out = tensor::linear_forward(self.value(x), self.value(w), self.value(b));
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, Op::Linear { x, w, b }, rg)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let out = tensor::global_avg_pool(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::GlobalAvgPool(x), rg)
    }

    pub fn pad_shortcut(&mut self, x: Var, out_channels: usize) -> Var {
        let out = tensor::pad_shortcut_forward(self.value(x), out_channels);
        let rg = self.rg(x);
        self.push(out, Op::PadShortcut(x), rg)
    }

    /// Columns `[start, start + len)` of a `[B, N]` tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let n = xv.shape()[1];
        let data = xv
            .data()
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let out = Tensor::new(vec![xv.batch(), len], data);
        let rg = self.rg(x);
        self.push(out, Op::SliceCols { x, start }, rg)
    }

    /// Batch-mean cross-entropy of `softmax(logits)` against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.batch(), labels.len());
        let logp = tensor::log_softmax_rows(lv, 1.0);
        let n = lv.shape()[1];
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(i, &y)| logp.data()[i * n + y])
            .sum::<f32>()
            / labels.len() as f32;
        let probs = logp.map(f32::exp);
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Batch-mean `KL(softmax(teacher/τ) ‖ softmax(student/τ))`; the teacher
    /// side is a constant.
    pub fn kl_distill(&mut self, student: Var, teacher_logits: &Tensor, tau: f32) -> Var {
        let sv = self.value(student);
        assert_eq!(sv.shape(), teacher_logits.shape());
        let log_t = tensor::log_softmax_rows(teacher_logits, tau);
        let log_s = tensor::log_softmax_rows(sv, tau);
        let teacher_probs = log_t.map(f32::exp);
        let mut kl = 0.0;
        for ((&t, &lt), &ls) in teacher_probs.data().iter().zip(log_t.data()).zip(log_s.data()) {
            if t > 0.0 {
                kl += t * (lt - ls);
            }
        }
        let kl = kl / sv.batch() as f32;
        let student_probs = log_s.map(f32::exp);
        let rg = self.rg(student);
        self.push(
            Tensor::scalar(kl),
            Op::KlDistill {
                student,
                teacher_probs,
                student_probs,
                tau,
            },
            rg,
        )
    }

    fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Conv { x, w, geom } => {
                    let (dx, dw) =
                        tensor::conv2d_backward(self.value(*x), self.value(*w), &g, geom);
                    if self.rg(*x) {
                        Self::acc(&mut grads, *x, dx);
                    }
                    if self.rg(*w) {
                        Self::acc(&mut grads, *w, dw);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let shape = xhat.shape();
                    let (batch, ch) = (shape[0], shape[1]);
                    let plane: usize = shape[2..].iter().product();
                    let count = (batch * plane) as f32;
                    let gv = self.value(*gamma).data();
                    let mut dgamma = vec![0.0; ch];
                    let mut dbeta = vec![0.0; ch];
                    for b in 0..batch {
                        for c in 0..ch {
                            let off = (b * ch + c) * plane;
                            for j in off..off + plane {
                                dgamma[c] += g.data()[j] * xhat.data()[j];
                                dbeta[c] += g.data()[j];
                            }
                        }
                    }
                    if self.rg(*x) {
                        let mut dx = vec![0.0; xhat.len()];
                        for b in 0..batch {
                            for c in 0..ch {
                                let off = (b * ch + c) * plane;
                                let k = gv[c] * inv_std[c];
                                for j in off..off + plane {
                                    dx[j] = if *batch_stats {
                                        k * (g.data()[j]
                                            - dbeta[c] / count
                                            - xhat.data()[j] * dgamma[c] / count)
                                    } else {
                                        k * g.data()[j]
                                    };
                                }
                            }
                        }
                        Self::acc(&mut grads, *x, Tensor::new(shape.to_vec(), dx));
                    }
                    Self::acc(&mut grads, *gamma, Tensor::new(vec![ch], dgamma));
                    Self::acc(&mut grads, *beta, Tensor::new(vec![ch], dbeta));
                }
                Op::Relu(x) => {
                    let dx = self.value(*x).zip_map(&g, |v, d| if v > 0.0 { d } else { 0.0 });
                    Self::acc(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        Self::acc(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        Self::acc(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        Self::acc(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        Self::acc(&mut grads, *b, g.map(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let da = g.zip_map(self.value(*b), |d, q| d * q);
                        Self::acc(&mut grads, *a, da);
                    }
                    if self.rg(*b) {
                        let db = g.zip_map(self.value(*a), |d, p| d * p);
                        Self::acc(&mut grads, *b, db);
                    }
                }
                Op::RowScale { x, s } => {
                    let xv = self.value(*x);
                    let sv = self.value(*s);
                    let row = xv.row_len();
                    if self.rg(*x) {
                        let mut dx = g.clone();
                        for (chunk, &k) in dx.data_mut().chunks_mut(row).zip(sv.data()) {
                            chunk.iter_mut().for_each(|v| *v *= k);
                        }
                        Self::acc(&mut grads, *x, dx);
                    }
                    if self.rg(*s) {
                        let ds = g
                            .data()
                            .chunks(row)
                            .zip(xv.data().chunks(row))
                            .map(|(gr, xr)| gr.iter().zip(xr).map(|(p, q)| p * q).sum())
                            .collect();
                        Self::acc(&mut grads, *s, Tensor::new(sv.shape().to_vec(), ds));
                    }
                }
                Op::Scale(x, k) => {
                    let k = *k;
                    Self::acc(&mut grads, *x, g.map(|v| v * k));
                }
                Op::Sigmoid(x) => {
                    let dx = node.value.zip_map(&g, |y, d| d * y * (1.0 - y));
                    Self::acc(&mut grads, *x, dx);
                }
                Op::Tanh(x) => {
                    let dx = node.value.zip_map(&g, |y, d| d * (1.0 - y * y));
                    Self::acc(&mut grads, *x, dx);
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) =
                        tensor::linear_backward(self.value(*x), self.value(*w), &g);
                    if self.rg(*x) {
                        Self::acc(&mut grads, *x, dx);
                    }
                    if self.rg(*w) {
                        Self::acc(&mut grads, *w, dw);
                    }
                    if self.rg(*b) {
                        Self::acc(&mut grads, *b, db);
                    }
                }
                Op::GlobalAvgPool(x) => {
                    let xs = self.value(*x).shape().to_vec();
                    let plane: usize = xs[2..].iter().product();
                    let mut dx = Vec::with_capacity(plane * g.len());
                    for &d in g.data() {
                        dx.extend(std::iter::repeat_n(d / plane as f32, plane));
                    }
                    Self::acc(&mut grads, *x, Tensor::new(xs, dx));
                }
                Op::PadShortcut(x) => {
                    let dx = tensor::pad_shortcut_backward(self.value(*x).shape(), &g);
                    Self::acc(&mut grads, *x, dx);
                }
                Op::SliceCols { x, start } => {
                    let xs = self.value(*x).shape().to_vec();
                    let (n, len) = (xs[1], g.shape()[1]);
                    let mut dx = vec![0.0; xs[0] * n];
                    for (r, grow) in g.data().chunks(len).enumerate() {
                        dx[r * n + start..r * n + start + len].copy_from_slice(grow);
                    }
                    Self::acc(&mut grads, *x, Tensor::new(xs, dx));
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let scale = g.item() / labels.len() as f32;
                    let n = probs.shape()[1];
                    let mut dl = probs.data().to_vec();
                    for (i, &y) in labels.iter().enumerate() {
                        dl[i * n + y] -= 1.0;
                    }
                    dl.iter_mut().for_each(|v| *v *= scale);
                    Self::acc(&mut grads, *logits, Tensor::new(probs.shape().to_vec(), dl));
                }
                Op::KlDistill {
                    student,
                    teacher_probs,
                    student_probs,
                    tau,
                } => {
                    let scale = g.item() / (student_probs.batch() as f32 * tau);
                    let ds = student_probs.zip_map(teacher_probs, |s, t| (s - t) * scale);
                    Self::acc(&mut grads, *student, ds);
                }
            }
        }
        let by_param = self
            .params
            .iter()
            .filter_map(|(&id, &v)| grads[v.0].clone().map(|g| (id, g)))
            .collect();
        self.node_grads = grads;
        Gradients { by_param }
    }

    /// Gradient of a leaf created by [`Tape::input_with_grad`] or [`Tape::param`]
    /// after the last [`Tape::backward`].
    pub fn grad_of(&self, v: Var) -> Option<&Tensor> {
        self.node_grads.get(v.0).and_then(Option::as_ref)
    }
}
