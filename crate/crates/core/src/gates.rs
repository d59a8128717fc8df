//! Gating modules that score each residual block with a mark in `(0, 1)`.
//!
//! Two families are provided. [`ConvGate`] is a per-block feed-forward scorer
//! (two strided 3×3 convolutions, global pooling, a single-unit head).
//! [`RecurGate`] shares one LSTM cell across the whole network; each block
//! contributes a pooled, linearly projected embedding as one recurrent step.
//!
//! Both consume the block *input*, which is the previous block's output.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BnParams, Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::netcore::{declare_bn, BlockSpec, LayerShape};
use crate::params::{kaiming_conv, uniform_linear, ParamId, ParamKind, ParamStore, GATE_PREFIX};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GateKind {
    Conv,
    #[default]
    Recur,
}

impl FromStr for GateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(GateKind::Conv),
            "recur" => Ok(GateKind::Recur),
            other => Err(Error::Config(format!(
                "unknown gate type {other:?} (expected \"conv\" or \"recur\")"
            ))),
        }
    }
}

impl fmt::Display for GateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateKind::Conv => "conv",
            GateKind::Recur => "recur",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGateSpec {
    pub reduce_channels: usize,
    pub conv_strides: (usize, usize),
    /// Width of the single-unit head's input; equals `reduce_channels`.
    pub fc_in: usize,
}

impl Default for ConvGateSpec {
    fn default() -> Self {
        Self {
            reduce_channels: 16,
            conv_strides: (2, 2),
            fc_in: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecurGateSpec {
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for RecurGateSpec {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            hidden_dim: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub kind: GateKind,
    pub conv: ConvGateSpec,
    pub recur: RecurGateSpec,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            kind: GateKind::default(),
            conv: ConvGateSpec::default(),
            recur: RecurGateSpec::default(),
        }
    }
}

impl GateConfig {
    pub fn of_kind(kind: GateKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }
}

/// A single importance mark, strictly inside `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct GateOutput(f32);

impl GateOutput {
    pub fn new(mark: f32) -> Result<Self> {
        if mark > 0.0 && mark < 1.0 {
            Ok(Self(mark))
        } else {
            Err(Error::Numeric(format!("gate mark {mark} outside (0, 1)")))
        }
    }

    pub fn mark(self) -> f32 {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ConvGate {
    pub spec: ConvGateSpec,
    conv1: ParamId,
    bn1: BnParams,
    conv2: ParamId,
    bn2: BnParams,
    fc_w: ParamId,
    fc_b: ParamId,
}

impl ConvGate {
    pub fn declare(
        store: &mut ParamStore,
        block: usize,
        in_shape: LayerShape,
        spec: ConvGateSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (s1, s2) = spec.conv_strides;
        if s1 == 0 || s2 == 0 || spec.reduce_channels == 0 {
            return Err(Error::InvalidSpec("conv gate strides and width must be positive".into()));
        }
        let min = s1 * s2;
        if in_shape.height < min || in_shape.width < min {
            return Err(Error::InvalidSpec(format!(
                "block {block}: {}x{} input is too small for a conv gate with strides {s1},{s2}",
                in_shape.height, in_shape.width
            )));
        }
        if spec.fc_in != spec.reduce_channels {
            return Err(Error::InvalidSpec(format!(
                "conv gate fc_in {} must equal reduce_channels {}",
                spec.fc_in, spec.reduce_channels
            )));
        }
        let p = format!("{GATE_PREFIX}{block}");
        let r = spec.reduce_channels;
        let conv1 = store.push(
            format!("{p}.conv1.weight"),
            ParamKind::Trainable,
            kaiming_conv(rng, r, in_shape.channels, 3),
        );
        let bn1 = declare_bn(store, &format!("{p}.bn1"), r);
        let conv2 = store.push(
            format!("{p}.conv2.weight"),
            ParamKind::Trainable,
            kaiming_conv(rng, r, r, 3),
        );
        let bn2 = declare_bn(store, &format!("{p}.bn2"), r);
        let (w, b) = uniform_linear(rng, 1, r);
        let fc_w = store.push(format!("{p}.fc.weight"), ParamKind::Trainable, w);
        let fc_b = store.push(format!("{p}.fc.bias"), ParamKind::Trainable, b);
        Ok(Self {
            spec,
            conv1,
            bn1,
            conv2,
            bn2,
            fc_w,
            fc_b,
        })
    }
}

/// Strided conv → norm → ReLU, twice, then pool → dense → sigmoid. Returns `[B, 1]` marks.
pub fn conv_gate_forward(
    tape: &mut Tape,
    store: &ParamStore,
    gate: &ConvGate,
    input: Var,
    mode: Mode,
) -> Var {
    let (s1, s2) = gate.spec.conv_strides;
    let w1 = tape.param(store, gate.conv1);
    let h = tape.conv2d(input, w1, s1, 1);
    let h = tape.batch_norm(store, h, gate.bn1, mode);
    let h = tape.relu(h);
    let w2 = tape.param(store, gate.conv2);
    let h = tape.conv2d(h, w2, s2, 1);
    let h = tape.batch_norm(store, h, gate.bn2, mode);
    let h = tape.relu(h);
    let pooled = tape.global_avg_pool(h);
    let fw = tape.param(store, gate.fc_w);
    let fb = tape.param(store, gate.fc_b);
    let logit = tape.linear(pooled, fw, fb);
    tape.sigmoid(logit)
}

#[derive(Debug, Clone)]
pub struct RecurGate {
    pub spec: RecurGateSpec,
    /// Per-block projection of the pooled block input to `embed_dim`.
    proj: Vec<(ParamId, ParamId)>,
    w_ih: ParamId,
    w_hh: ParamId,
    b_ih: ParamId,
    b_hh: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

/// LSTM state `(h, c)`, each `[B, hidden_dim]`, owned by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct RecurState {
    pub h: Var,
    pub c: Var,
}

impl RecurState {
    pub fn zeros(tape: &mut Tape, batch: usize, hidden_dim: usize) -> Self {
        Self {
            h: tape.constant(Tensor::zeros(&[batch, hidden_dim])),
            c: tape.constant(Tensor::zeros(&[batch, hidden_dim])),
        }
    }
}

impl RecurGate {
    pub fn declare(
        store: &mut ParamStore,
        blocks: &[BlockSpec],
        spec: RecurGateSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if spec.embed_dim == 0 || spec.hidden_dim == 0 {
            return Err(Error::InvalidSpec("recurrent gate widths must be positive".into()));
        }
        let (e, hd) = (spec.embed_dim, spec.hidden_dim);
        let mut proj = Vec::with_capacity(blocks.len());
        for b in blocks {
            let (w, bias) = uniform_linear(rng, e, b.in_shape.channels);
            proj.push((
                store.push(format!("{GATE_PREFIX}{}.proj.weight", b.index), ParamKind::Trainable, w),
                store.push(format!("{GATE_PREFIX}{}.proj.bias", b.index), ParamKind::Trainable, bias),
            ));
        }
        let p = format!("{GATE_PREFIX}lstm");
        let (w_ih, b_ih) = uniform_linear(rng, 4 * hd, e);
        let (w_hh, b_hh) = uniform_linear(rng, 4 * hd, hd);
        let w_ih = store.push(format!("{p}.weight_ih"), ParamKind::Trainable, w_ih);
        let w_hh = store.push(format!("{p}.weight_hh"), ParamKind::Trainable, w_hh);
        let b_ih = store.push(format!("{p}.bias_ih"), ParamKind::Trainable, b_ih);
        let b_hh = store.push(format!("{p}.bias_hh"), ParamKind::Trainable, b_hh);
        let (hw, hb) = uniform_linear(rng, 1, hd);
        let head_w = store.push(format!("{GATE_PREFIX}head.weight"), ParamKind::Trainable, hw);
        let head_b = store.push(format!("{GATE_PREFIX}head.bias"), ParamKind::Trainable, hb);
        Ok(Self {
            spec,
            proj,
            w_ih,
            w_hh,
            b_ih,
            b_hh,
            head_w,
            head_b,
        })
    }
}

/// One recurrent step for block `block`. Returns `([B, 1]` marks, advanced state`)`.
pub fn recur_gate_forward(
    tape: &mut Tape,
    store: &ParamStore,
    gate: &RecurGate,
    block: usize,
    input: Var,
    state: RecurState,
) -> Result<(Var, RecurState)> {
    let hd = gate.spec.hidden_dim;
    for (name, v) in [("h", state.h), ("c", state.c)] {
        let width = tape.value(v).shape()[1];
        if width != hd {
            return Err(Error::Contract(format!(
                "recurrent state {name} has width {width}, gate expects {hd}"
            )));
        }
    }
    let (pw, pb) = gate.proj[block];
    let pooled = tape.global_avg_pool(input);
    let pw = tape.param(store, pw);
    let pb = tape.param(store, pb);
    let embed = tape.linear(pooled, pw, pb);

    let w_ih = tape.param(store, gate.w_ih);
    let b_ih = tape.param(store, gate.b_ih);
    let w_hh = tape.param(store, gate.w_hh);
    let b_hh = tape.param(store, gate.b_hh);
    let gx = tape.linear(embed, w_ih, b_ih);
    let gh = tape.linear(state.h, w_hh, b_hh);
    let pre = tape.add(gx, gh);
    // PyTorch gate order: input, forget, cell, output.
    let i = tape.slice_cols(pre, 0, hd);
    let f = tape.slice_cols(pre, hd, hd);
    let g = tape.slice_cols(pre, 2 * hd, hd);
    let o = tape.slice_cols(pre, 3 * hd, hd);
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let fc = tape.mul(f, state.c);
    let ig = tape.mul(i, g);
    let c = tape.add(fc, ig);
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc);

    let hw = tape.param(store, gate.head_w);
    let hb = tape.param(store, gate.head_b);
    let logit = tape.linear(h, hw, hb);
    let mark = tape.sigmoid(logit);
    Ok((mark, RecurState { h, c }))
}

/// The gate set of one network.
#[derive(Debug, Clone)]
pub enum Gates {
    Conv(Vec<ConvGate>),
    Recur(RecurGate),
}

impl Gates {
    pub fn declare(
        store: &mut ParamStore,
        blocks: &[BlockSpec],
        cfg: &GateConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        match cfg.kind {
            GateKind::Conv => blocks
                .iter()
                .map(|b| ConvGate::declare(store, b.index, b.in_shape, cfg.conv, rng))
                .collect::<Result<Vec<_>>>()
                .map(Gates::Conv),
            GateKind::Recur => RecurGate::declare(store, blocks, cfg.recur, rng).map(Gates::Recur),
        }
    }

    pub fn kind(&self) -> GateKind {
        match self {
            Gates::Conv(_) => GateKind::Conv,
            Gates::Recur(_) => GateKind::Recur,
        }
    }
}
