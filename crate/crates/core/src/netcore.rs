//! Block-structured residual networks with per-block gate control.
//!
//! A network is a stem convolution, an ordered list of residual blocks and a
//! pooled linear classifier. Each block is in one of three states:
//!
//! * `Active`: output is `I + m·(B(I) − I)` where `m` is the block's gate mark;
//! * `Pruned`: the block is skipped and its input passes through unchanged;
//! * `Fixed`: the block runs unconditionally and its gate is bypassed.
//!
//! `B(I)` is the complete residual block, including its own shortcut and final
//! rectifier.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BnParams, Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::gates::{
    conv_gate_forward, recur_gate_forward, GateConfig, GateKind, Gates, RecurState,
};
use crate::params::{kaiming_conv, uniform_linear, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LayerShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn elements(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn with_batch(&self, batch: usize) -> Vec<usize> {
        vec![batch, self.channels, self.height, self.width]
    }

    fn is_valid(&self) -> bool {
        self.channels >= 1 && self.height >= 1 && self.width >= 1
    }
}

impl fmt::Display for LayerShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    BasicResidual,
    Stem,
    Classifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shortcut {
    Identity,
    /// Parameter-free stride-2 subsampling with zero-padded extra channels.
    PadDownsample,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub index: usize,
    /// Resolution stage the block belongs to (0-based).
    pub stage: usize,
    pub in_shape: LayerShape,
    pub out_shape: LayerShape,
    /// Output width of the first convolution; equals `out_shape.channels`
    /// unless channel pruning narrowed it.
    pub mid_channels: usize,
    pub kind: BlockKind,
    pub stride: usize,
    pub shortcut: Shortcut,
}

impl BlockSpec {
    /// A basic residual block; stride and shortcut follow from the shapes.
    pub fn basic(index: usize, stage: usize, in_shape: LayerShape, out_shape: LayerShape) -> Self {
        let downsample = in_shape != out_shape;
        Self {
            index,
            stage,
            in_shape,
            out_shape,
            mid_channels: out_shape.channels,
            kind: BlockKind::BasicResidual,
            stride: if downsample { 2 } else { 1 },
            shortcut: if downsample {
                Shortcut::PadDownsample
            } else {
                Shortcut::Identity
            },
        }
    }

    fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(format!("block {}: {msg}", self.index)));
        if !self.in_shape.is_valid() || !self.out_shape.is_valid() || self.mid_channels == 0 {
            return bad("all dimensions must be at least 1".into());
        }
        if self.kind != BlockKind::BasicResidual {
            return bad(format!("{:?} is not a prunable block kind", self.kind));
        }
        match self.stride {
            1 => {
                if self.in_shape.height != self.out_shape.height
                    || self.in_shape.width != self.out_shape.width
                {
                    return bad("stride 1 must preserve spatial dims".into());
                }
            }
            2 => {
                if self.out_shape.height != self.in_shape.height.div_ceil(2)
                    || self.out_shape.width != self.in_shape.width.div_ceil(2)
                {
                    return bad("stride 2 must halve spatial dims".into());
                }
            }
            s => return bad(format!("unsupported stride {s}")),
        }
        match self.shortcut {
            Shortcut::Identity if self.in_shape != self.out_shape => {
                bad("identity shortcut requires equal input and output shapes".into())
            }
            Shortcut::PadDownsample
                if self.stride != 2 || self.out_shape.channels < self.in_shape.channels =>
            {
                bad("pad shortcut requires stride 2 and non-decreasing channels".into())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: LayerShape,
    /// Output channels of the stem convolution.
    pub stem_channels: usize,
    pub num_classes: usize,
    pub blocks: Vec<BlockSpec>,
}

impl NetworkSpec {
    /// CIFAR-style residual network: a 3×3 stem, then one stage per entry of
    /// `stage_blocks`, each stage after the first halving resolution and
    /// moving to the next width in `widths`.
    pub fn cifar_resnet(
        input_shape: LayerShape,
        stage_blocks: &[usize],
        widths: &[usize],
        num_classes: usize,
    ) -> Self {
        assert_eq!(stage_blocks.len(), widths.len());
        let mut blocks = Vec::new();
        let mut shape = LayerShape::new(widths[0], input_shape.height, input_shape.width);
        for (stage, (&n, &w)) in stage_blocks.iter().zip(widths).enumerate() {
            for j in 0..n {
                let out = if stage > 0 && j == 0 {
                    LayerShape::new(w, shape.height.div_ceil(2), shape.width.div_ceil(2))
                } else {
                    LayerShape::new(w, shape.height, shape.width)
                };
                blocks.push(BlockSpec::basic(blocks.len(), stage, shape, out));
                shape = out;
            }
        }
        Self {
            input_shape,
            stem_channels: widths[0],
            num_classes,
            blocks,
        }
    }

    /// Depth-`6n+2` CIFAR ResNet with widths 16/32/64 on 3×32×32 input.
    pub fn resnet_cifar(depth: usize, num_classes: usize) -> Result<Self> {
        if depth < 8 || (depth - 2) % 6 != 0 {
            return Err(Error::InvalidSpec(format!("depth {depth} is not of the form 6n+2")));
        }
        let n = (depth - 2) / 6;
        Ok(Self::cifar_resnet(
            LayerShape::new(3, 32, 32),
            &[n, n, n],
            &[16, 32, 64],
            num_classes,
        ))
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Spatial size after the stem (equal to the input size).
    pub fn stem_shape(&self) -> LayerShape {
        LayerShape::new(self.stem_channels, self.input_shape.height, self.input_shape.width)
    }

    /// Shape entering the classifier.
    pub fn feature_shape(&self) -> LayerShape {
        self.blocks
            .last()
            .map(|b| b.out_shape)
            .unwrap_or_else(|| self.stem_shape())
    }

    pub fn exempt_blocks(&self) -> BTreeSet<usize> {
        self.blocks
            .iter()
            .filter(|b| b.shortcut == Shortcut::PadDownsample)
            .map(|b| b.index)
            .collect()
    }

    /// Checks per-block invariants and that consecutive shapes chain. An empty
    /// block list is allowed here (compact models may have no blocks left).
    pub fn validate(&self) -> Result<()> {
        if !self.input_shape.is_valid() || self.stem_channels == 0 || self.num_classes == 0 {
            return Err(Error::InvalidSpec(
                "input shape, stem width and class count must be positive".into(),
            ));
        }
        let mut prev = self.stem_shape();
        for (i, b) in self.blocks.iter().enumerate() {
            if b.index != i {
                return Err(Error::InvalidSpec(format!(
                    "block at position {i} carries index {}",
                    b.index
                )));
            }
            b.check()?;
            if b.in_shape != prev {
                return Err(Error::SpecShape {
                    from: i.saturating_sub(1),
                    to: i,
                    detail: format!("{} feeds a block expecting {}", prev, b.in_shape),
                });
            }
            prev = b.out_shape;
        }
        Ok(())
    }
}

/// Named architecture presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Rn20,
    Rn32,
    Rn56,
    Rn110,
    /// Desk-scale network: 3×16×16 input, stages of 3/4/4 blocks at widths 4/8/16.
    Micro,
}

impl Arch {
    pub fn spec(self, num_classes: usize) -> NetworkSpec {
        match self {
            Arch::Rn20 => NetworkSpec::resnet_cifar(20, num_classes),
            Arch::Rn32 => NetworkSpec::resnet_cifar(32, num_classes),
            Arch::Rn56 => NetworkSpec::resnet_cifar(56, num_classes),
            Arch::Rn110 => NetworkSpec::resnet_cifar(110, num_classes),
            Arch::Micro => Ok(NetworkSpec::cifar_resnet(
                LayerShape::new(3, 16, 16),
                &[3, 4, 4],
                &[4, 8, 16],
                num_classes,
            )),
        }
        .expect("preset depths are valid")
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "rn20" => Arch::Rn20,
            "rn32" => Arch::Rn32,
            "rn56" => Arch::Rn56,
            "rn110" => Arch::Rn110,
            "micro" => Arch::Micro,
            other => {
                return Err(Error::Config(format!(
                    "unknown arch {other:?} (expected rn20|rn32|rn56|rn110|micro)"
                )))
            }
        })
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Rn20 => "rn20",
            Arch::Rn32 => "rn32",
            Arch::Rn56 => "rn56",
            Arch::Rn110 => "rn110",
            Arch::Micro => "micro",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockState {
    Active,
    Pruned,
    Fixed,
}

impl fmt::Display for BlockState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockState::Active => "active",
            BlockState::Pruned => "pruned",
            BlockState::Fixed => "fixed",
        })
    }
}

/// Per-block pruning state plus the set of blocks that may never be pruned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateMask {
    states: Vec<BlockState>,
    exempt: BTreeSet<usize>,
}

impl GateMask {
    /// Training start: downsampling blocks are exempt and `Fixed`, every other
    /// block is gate-controlled.
    pub fn initial(spec: &NetworkSpec) -> Self {
        let exempt = spec.exempt_blocks();
        let states = (0..spec.len())
            .map(|i| {
                if exempt.contains(&i) {
                    BlockState::Fixed
                } else {
                    BlockState::Active
                }
            })
            .collect();
        Self { states, exempt }
    }

    /// Every block `Fixed`: the plain, gate-free network.
    pub fn all_fixed(spec: &NetworkSpec) -> Self {
        Self {
            states: vec![BlockState::Fixed; spec.len()],
            exempt: spec.exempt_blocks(),
        }
    }

    pub fn from_parts(states: Vec<BlockState>, exempt: BTreeSet<usize>) -> Result<Self> {
        for &e in &exempt {
            match states.get(e) {
                None => return Err(Error::Contract(format!("exempt block {e} out of range"))),
                Some(BlockState::Pruned) => {
                    return Err(Error::Contract(format!("exempt block {e} is pruned")))
                }
                _ => {}
            }
        }
        Ok(Self { states, exempt })
    }

    pub fn states(&self) -> &[BlockState] {
        &self.states
    }

    pub fn state(&self, block: usize) -> BlockState {
        self.states[block]
    }

    pub fn exempt(&self) -> &BTreeSet<usize> {
        &self.exempt
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn is_prunable(&self, block: usize) -> bool {
        self.states[block] == BlockState::Active && !self.exempt.contains(&block)
    }

    pub fn prunable(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_prunable(i)).collect()
    }

    pub fn unpruned_count(&self) -> usize {
        self.states.iter().filter(|&&s| s != BlockState::Pruned).count()
    }

    pub fn pruned(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.states[i] == BlockState::Pruned)
            .collect()
    }

    /// Surviving blocks (everything not pruned), in order.
    pub fn surviving(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.states[i] != BlockState::Pruned)
            .collect()
    }

    pub fn prune(&mut self, block: usize) -> Result<()> {
        if self.exempt.contains(&block) {
            return Err(Error::Contract(format!("block {block} is exempt from pruning")));
        }
        match self.states.get(block) {
            Some(BlockState::Active) => {
                self.states[block] = BlockState::Pruned;
                Ok(())
            }
            Some(s) => Err(Error::Contract(format!("block {block} is {s}, not active"))),
            None => Err(Error::Contract(format!("block {block} out of range"))),
        }
    }

    /// Stage-III transition: every surviving block becomes `Fixed`.
    pub fn fix_unpruned(&mut self) {
        for s in &mut self.states {
            if *s == BlockState::Active {
                *s = BlockState::Fixed;
            }
        }
    }

    /// Force a state on a block, keeping the exempt invariant.
    pub fn set(&mut self, block: usize, state: BlockState) -> Result<()> {
        if state == BlockState::Pruned && self.exempt.contains(&block) {
            return Err(Error::Contract(format!("block {block} is exempt from pruning")));
        }
        self.states[block] = state;
        Ok(())
    }
}

pub(crate) fn declare_bn(store: &mut ParamStore, prefix: &str, channels: usize) -> BnParams {
    BnParams {
        gamma: store.push(format!("{prefix}.weight"), ParamKind::Trainable, Tensor::full(&[channels], 1.0)),
        beta: store.push(format!("{prefix}.bias"), ParamKind::Trainable, Tensor::zeros(&[channels])),
        running_mean: store.push(format!("{prefix}.running_mean"), ParamKind::Buffer, Tensor::zeros(&[channels])),
        running_var: store.push(format!("{prefix}.running_var"), ParamKind::Buffer, Tensor::full(&[channels], 1.0)),
    }
}

#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub spec: BlockSpec,
    pub conv1: ParamId,
    pub bn1: BnParams,
    pub conv2: ParamId,
    pub bn2: BnParams,
}

/// Stem, residual blocks and classifier, without any gating.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub spec: NetworkSpec,
    pub store: ParamStore,
    pub stem_conv: ParamId,
    pub stem_bn: BnParams,
    pub blocks: Vec<ResidualBlock>,
    pub fc_w: ParamId,
    pub fc_b: ParamId,
}

impl Backbone {
    /// Declares all backbone parameters into a fresh store, in checkpoint order.
    pub fn declare(spec: NetworkSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let stem_conv = store.push(
            "stem.conv.weight",
            ParamKind::Trainable,
            kaiming_conv(rng, spec.stem_channels, spec.input_shape.channels, 3),
        );
        let stem_bn = declare_bn(&mut store, "stem.bn", spec.stem_channels);
        let mut blocks = Vec::with_capacity(spec.len());
        for b in &spec.blocks {
            let p = format!("block{}", b.index);
            let conv1 = store.push(
                format!("{p}.conv1.weight"),
                ParamKind::Trainable,
                kaiming_conv(rng, b.mid_channels, b.in_shape.channels, 3),
            );
            let bn1 = declare_bn(&mut store, &format!("{p}.bn1"), b.mid_channels);
            let conv2 = store.push(
                format!("{p}.conv2.weight"),
                ParamKind::Trainable,
                kaiming_conv(rng, b.out_shape.channels, b.mid_channels, 3),
            );
            let bn2 = declare_bn(&mut store, &format!("{p}.bn2"), b.out_shape.channels);
            blocks.push(ResidualBlock {
                spec: b.clone(),
                conv1,
                bn1,
                conv2,
                bn2,
            });
        }
        let feat = spec.feature_shape().channels;
        let (w, bias) = uniform_linear(rng, spec.num_classes, feat);
        let fc_w = store.push("fc.weight", ParamKind::Trainable, w);
        let fc_b = store.push("fc.bias", ParamKind::Trainable, bias);
        Ok(Self {
            spec,
            store,
            stem_conv,
            stem_bn,
            blocks,
            fc_w,
            fc_b,
        })
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let expected = self.spec.input_shape.with_batch(x.shape().first().copied().unwrap_or(0));
        if x.shape() != expected.as_slice() {
            return Err(Error::InputShape {
                block: 0,
                expected,
                got: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn stem(&self, tape: &mut Tape, x: Var, mode: Mode) -> Var {
        let w = tape.param(&self.store, self.stem_conv);
        let h = tape.conv2d(x, w, 1, 1);
        let h = tape.batch_norm(&self.store, h, self.stem_bn, mode);
        tape.relu(h)
    }

    /// `B_l(I_l)`: the full residual block including shortcut and final ReLU.
    pub fn block(&self, tape: &mut Tape, index: usize, x: Var, mode: Mode) -> Result<Var> {
        let blk = &self.blocks[index];
        let got = tape.value(x).shape();
        let expected = blk.spec.in_shape.with_batch(got[0]);
        if got != expected.as_slice() {
            return Err(Error::InputShape {
                block: index,
                expected,
                got: got.to_vec(),
            });
        }
        let s = &self.store;
        let w1 = tape.param(s, blk.conv1);
        let h = tape.conv2d(x, w1, blk.spec.stride, 1);
        let h = tape.batch_norm(s, h, blk.bn1, mode);
        let h = tape.relu(h);
        let w2 = tape.param(s, blk.conv2);
        let h = tape.conv2d(h, w2, 1, 1);
        let h = tape.batch_norm(s, h, blk.bn2, mode);
        let short = match blk.spec.shortcut {
            Shortcut::Identity => x,
            Shortcut::PadDownsample => tape.pad_shortcut(x, blk.spec.out_shape.channels),
        };
        let sum = tape.add(h, short);
        Ok(tape.relu(sum))
    }

    /// Global average pool then the dense classifier.
    pub fn head(&self, tape: &mut Tape, f: Var) -> Var {
        let pooled = tape.global_avg_pool(f);
        let w = tape.param(&self.store, self.fc_w);
        let b = tape.param(&self.store, self.fc_b);
        tape.linear(pooled, w, b)
    }

    /// Plain forward through every block.
    pub fn forward(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        self.check_input(tape.value(x))?;
        let mut h = self.stem(tape, x, mode);
        for i in 0..self.blocks.len() {
            h = self.block(tape, i, h, mode)?;
        }
        Ok(self.head(tape, h))
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let logits = self.forward(&mut tape, xv, Mode::Eval)?;
        Ok(tape.value(logits).clone())
    }
}

/// `I + m·(O − I)`, i.e. `O·m + I·(1 − m)` with one mark per batch entry.
pub fn blend(tape: &mut Tape, block_out: Var, input: Var, mark: Var) -> Var {
    let delta = tape.sub(block_out, input);
    let scaled = tape.row_scale(delta, mark);
    tape.add(input, scaled)
}

/// One gated step: `Active` blends with `mark`, `Pruned` passes `input`
/// through, `Fixed` returns the block output.
pub fn gated_block_step(
    tape: &mut Tape,
    backbone: &Backbone,
    index: usize,
    input: Var,
    mark: Option<Var>,
    state: BlockState,
    mode: Mode,
) -> Result<Var> {
    match state {
        BlockState::Pruned => {
            if backbone.blocks[index].spec.shortcut == Shortcut::PadDownsample {
                return Err(Error::Contract(format!(
                    "block {index} changes shape and cannot be skipped"
                )));
            }
            Ok(input)
        }
        BlockState::Fixed => backbone.block(tape, index, input, mode),
        BlockState::Active => {
            let mark = mark.ok_or_else(|| {
                Error::Contract(format!("active block {index} evaluated without a mark"))
            })?;
            let out = backbone.block(tape, index, input, mode)?;
            Ok(blend(tape, out, input, mark))
        }
    }
}

/// Where active blocks take their marks from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MarkSource {
    Gates,
    /// Every active block uses this constant mark; gates are not evaluated.
    Forced(f32),
}

pub struct ForwardOutput {
    pub logits: Var,
    /// `[B, 1]` marks for active blocks; `None` for pruned and fixed blocks.
    pub marks: Vec<Option<Var>>,
}

/// Per-block inputs and outputs of one eval-mode forward.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    pub input: Tensor,
    pub block_inputs: Vec<Tensor>,
    pub block_outputs: Vec<Tensor>,
    pub feature: Tensor,
    pub logits: Tensor,
}

/// Backbone plus one gating module per block.
#[derive(Debug, Clone)]
pub struct GatedNetwork {
    pub backbone: Backbone,
    pub gates: Gates,
    pub gate_config: GateConfig,
}

/// Builds a gated network whose parameters are a pure function of `seed`.
pub fn build_network(spec: NetworkSpec, gate_config: GateConfig, seed: u64) -> Result<GatedNetwork> {
    if spec.is_empty() {
        return Err(Error::InvalidSpec("a network needs at least one block".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut backbone = Backbone::declare(spec, &mut rng)?;
    let gates = Gates::declare(&mut backbone.store, &backbone.spec.blocks, &gate_config, &mut rng)?;
    Ok(GatedNetwork {
        backbone,
        gates,
        gate_config,
    })
}

impl GatedNetwork {
    pub fn spec(&self) -> &NetworkSpec {
        &self.backbone.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.backbone.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.backbone.store
    }

    pub fn gate_kind(&self) -> GateKind {
        self.gates.kind()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, mask: &GateMask, mode: Mode) -> Result<ForwardOutput> {
        self.forward_with(tape, x, mask, mode, MarkSource::Gates)
    }

    pub fn forward_with(
        &self,
        tape: &mut Tape,
        x: Var,
        mask: &GateMask,
        mode: Mode,
        source: MarkSource,
    ) -> Result<ForwardOutput> {
        self.run(tape, x, mask, mode, source, None)
    }

    fn run(
        &self,
        tape: &mut Tape,
        x: Var,
        mask: &GateMask,
        mode: Mode,
        source: MarkSource,
        mut taps: Option<&mut Vec<(Var, Var)>>,
    ) -> Result<ForwardOutput> {
        let bb = &self.backbone;
        if mask.len() != bb.blocks.len() {
            return Err(Error::Contract(format!(
                "mask covers {} blocks, network has {}",
                mask.len(),
                bb.blocks.len()
            )));
        }
        bb.check_input(tape.value(x))?;
        let batch = tape.value(x).batch();
        let mut h = bb.stem(tape, x, mode);
        let mut marks = Vec::with_capacity(bb.blocks.len());
        let mut recur = match &self.gates {
            Gates::Recur(g) => Some(RecurState::zeros(tape, batch, g.spec.hidden_dim)),
            Gates::Conv(_) => None,
        };
        for i in 0..bb.blocks.len() {
            let state = mask.state(i);
            let mark = if state == BlockState::Active {
                Some(match source {
                    MarkSource::Forced(m) => tape.constant(Tensor::full(&[batch, 1], m)),
                    MarkSource::Gates => match &self.gates {
                        Gates::Conv(gs) => conv_gate_forward(tape, &bb.store, &gs[i], h, mode),
                        Gates::Recur(g) => {
                            let st = recur.expect("recurrent state exists for recurrent gates");
                            let (m, next) = recur_gate_forward(tape, &bb.store, g, i, h, st)?;
                            recur = Some(next);
                            m
                        }
                    },
                })
            } else {
                None
            };
            let input = h;
            h = gated_block_step(tape, bb, i, h, mark, state, mode)?;
            if let Some(t) = taps.as_deref_mut() {
                t.push((input, h));
            }
            marks.push(if source == MarkSource::Gates { mark } else { None });
        }
        let logits = bb.head(tape, h);
        Ok(ForwardOutput { logits, marks })
    }

    /// Eval-mode logits and per-block, per-instance marks.
    pub fn infer(&self, x: &Tensor, mask: &GateMask) -> Result<(Tensor, Vec<Option<Vec<f32>>>)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, xv, mask, Mode::Eval)?;
        let marks = out
            .marks
            .iter()
            .map(|m| m.map(|v| tape.value(v).data().to_vec()))
            .collect();
        Ok((tape.value(out.logits).clone(), marks))
    }

    /// Eval-mode forward recording every block's input and output.
    pub fn trace(&self, x: &Tensor, mask: &GateMask) -> Result<ActivationTrace> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut taps = Vec::new();
        let out = self.run(&mut tape, xv, mask, Mode::Eval, MarkSource::Gates, Some(&mut taps))?;
        let feature = taps
            .last()
            .map(|&(_, o)| tape.value(o).clone())
            .expect("gated networks have at least one block");
        Ok(ActivationTrace {
            input: x.clone(),
            block_inputs: taps.iter().map(|&(i, _)| tape.value(i).clone()).collect(),
            block_outputs: taps.iter().map(|&(_, o)| tape.value(o).clone()).collect(),
            feature,
            logits: tape.value(out.logits).clone(),
        })
    }
}
