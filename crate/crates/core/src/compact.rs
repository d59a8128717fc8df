//! Compact export and cost accounting.
//!
//! Costs are multiply-accumulates: `C_in·C_out·k²·H_out·W_out` per convolution
//! and `in·out` per dense layer. Normalization, rectifiers, pooling and the
//! parameter-free downsampling shortcut are free.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::netcore::{BlockSpec, BlockState, Backbone, GateMask, GatedNetwork, NetworkSpec, Shortcut};
use crate::params::{ParamStore, GATE_PREFIX};
use crate::tensor::Tensor;

/// A plain network left after removing gates and pruned blocks.
#[derive(Debug, Clone)]
pub struct CompactModel {
    pub backbone: Backbone,
    /// Original index of each surviving block.
    pub provenance: Vec<usize>,
    /// The unpruned architecture, kept for baseline accounting.
    pub source_spec: NetworkSpec,
}

impl CompactModel {
    pub fn spec(&self) -> &NetworkSpec {
        &self.backbone.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.backbone.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.backbone.store
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.backbone.infer(x)
    }

    /// A model with freshly declared (zero-seeded) parameters for `spec`,
    /// ready to be overwritten from a checkpoint.
    pub fn skeleton(spec: NetworkSpec, provenance: Vec<usize>, source_spec: NetworkSpec) -> Result<Self> {
        if provenance.len() != spec.len() {
            return Err(Error::Contract(format!(
                "{} provenance entries for {} blocks",
                provenance.len(),
                spec.len()
            )));
        }
        let backbone = Backbone::declare(spec, &mut ChaCha8Rng::seed_from_u64(0))?;
        Ok(Self {
            backbone,
            provenance,
            source_spec,
        })
    }
}

/// `spec` with the `removed` blocks dropped and the rest renumbered. Removed
/// blocks must preserve shape. Returns the new spec and the kept indices.
pub fn remove_blocks(spec: &NetworkSpec, removed: &[usize]) -> Result<(NetworkSpec, Vec<usize>)> {
    let mut blocks = Vec::new();
    let mut kept = Vec::new();
    for b in &spec.blocks {
        if removed.contains(&b.index) {
            if b.shortcut == Shortcut::PadDownsample {
                return Err(Error::Contract(format!(
                    "block {} changes shape and cannot be removed",
                    b.index
                )));
            }
            continue;
        }
        blocks.push(BlockSpec {
            index: blocks.len(),
            ..b.clone()
        });
        kept.push(b.index);
    }
    let out = NetworkSpec {
        blocks,
        ..spec.clone()
    };
    out.validate()?;
    Ok((out, kept))
}

/// Strips gates and pruned blocks. Every block must already be `Pruned` or
/// `Fixed`.
pub fn export_compact(net: &GatedNetwork, mask: &GateMask) -> Result<CompactModel> {
    if mask.len() != net.spec().len() {
        return Err(Error::Contract("mask and network sizes differ".into()));
    }
    if let Some(i) = mask.states().iter().position(|&s| s == BlockState::Active) {
        return Err(Error::ExportBeforeFixing(i));
    }
    let (spec, kept) = remove_blocks(net.spec(), &mask.pruned())?;
    let mut compact = CompactModel::skeleton(spec, kept, net.spec().clone())?;
    let src = net.store();
    let ids: Vec<_> = compact.store().iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let from = source_name(&name, &compact.provenance);
        let sid = src
            .find(&from)
            .ok_or_else(|| Error::Contract(format!("parameter {from} missing from source")))?;
        debug_assert!(!from.starts_with(GATE_PREFIX));
        *compact.store_mut().get_mut(id) = src.get(sid).clone();
    }
    Ok(compact)
}

/// Maps `block{new}.…` back to `block{old}.…`.
fn source_name(name: &str, provenance: &[usize]) -> String {
    if let Some(rest) = name.strip_prefix("block") {
        if let Some((idx, tail)) = rest.split_once('.') {
            if let Ok(i) = idx.parse::<usize>() {
                return format!("block{}.{tail}", provenance[i]);
            }
        }
    }
    name.to_string()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopsBreakdown {
    pub stem: u64,
    pub blocks: Vec<u64>,
    pub classifier: u64,
}

impl FlopsBreakdown {
    pub fn total(&self) -> u64 {
        self.stem + self.blocks.iter().sum::<u64>() + self.classifier
    }
}

fn conv_macs(c_in: usize, c_out: usize, k: usize, h_out: usize, w_out: usize) -> u64 {
    (c_in * c_out * k * k * h_out * w_out) as u64
}

/// Both 3×3 convolutions of one residual block.
pub fn block_flops(b: &BlockSpec) -> u64 {
    let (h, w) = (b.out_shape.height, b.out_shape.width);
    conv_macs(b.in_shape.channels, b.mid_channels, 3, h, w)
        + conv_macs(b.mid_channels, b.out_shape.channels, 3, h, w)
}

pub fn block_params(b: &BlockSpec) -> u64 {
    let convs = 9 * (b.in_shape.channels * b.mid_channels + b.mid_channels * b.out_shape.channels);
    (convs + 2 * b.mid_channels + 2 * b.out_shape.channels) as u64
}

pub fn flops_breakdown(spec: &NetworkSpec) -> FlopsBreakdown {
    let s = spec.input_shape;
    FlopsBreakdown {
        stem: conv_macs(s.channels, spec.stem_channels, 3, s.height, s.width),
        blocks: spec.blocks.iter().map(block_flops).collect(),
        classifier: (spec.feature_shape().channels * spec.num_classes) as u64,
    }
}

pub fn count_flops(spec: &NetworkSpec) -> u64 {
    flops_breakdown(spec).total()
}

/// Learnable scalars in convolutions, normalization (scale and shift) and
/// the classifier (weights and bias). Running statistics are not counted.
pub fn count_params(spec: &NetworkSpec) -> u64 {
    let stem = 9 * spec.input_shape.channels * spec.stem_channels + 2 * spec.stem_channels;
    let feat = spec.feature_shape().channels;
    let fc = feat * spec.num_classes + spec.num_classes;
    (stem + fc) as u64 + spec.blocks.iter().map(block_params).sum::<u64>()
}

/// `(1 − pruned/baseline)·100`.
pub fn drop_pct(baseline: u64, pruned: u64) -> f64 {
    if baseline == 0 {
        return 0.0;
    }
    (1.0 - pruned as f64 / baseline as f64) * 100.0
}

/// Millions with two decimals, e.g. `68.86M`.
pub fn millions(n: u64) -> String {
    format!("{:.2}M", n as f64 / 1e6)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressionReport {
    /// `abp`, `abp-sfp` or `baseline`.
    pub method: String,
    pub arch: String,
    pub blocks_total: usize,
    pub blocks_kept: usize,
    pub flops_baseline: u64,
    pub flops_pruned: u64,
    pub params_baseline: u64,
    pub params_pruned: u64,
    /// Drop under the channel-pruning accounting used for composed runs.
    pub sfp_convention_flops_drop_pct: Option<f64>,
}

impl CompressionReport {
    pub fn new(method: &str, arch: &str, baseline: &NetworkSpec, pruned: &NetworkSpec) -> Self {
        Self {
            method: method.into(),
            arch: arch.into(),
            blocks_total: baseline.len(),
            blocks_kept: pruned.len(),
            flops_baseline: count_flops(baseline),
            flops_pruned: count_flops(pruned),
            params_baseline: count_params(baseline),
            params_pruned: count_params(pruned),
            sfp_convention_flops_drop_pct: None,
        }
    }

    pub fn for_compact(method: &str, arch: &str, model: &CompactModel) -> Self {
        Self::new(method, arch, &model.source_spec, model.spec())
    }

    pub fn flops_drop_pct(&self) -> f64 {
        drop_pct(self.flops_baseline, self.flops_pruned)
    }

    pub fn params_drop_pct(&self) -> f64 {
        drop_pct(self.params_baseline, self.params_pruned)
    }

    /// `key = value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "method = {}", self.method);
        let _ = writeln!(s, "arch = {}", self.arch);
        let _ = writeln!(s, "blocks_total = {}", self.blocks_total);
        let _ = writeln!(s, "blocks_kept = {}", self.blocks_kept);
        let _ = writeln!(s, "flops_baseline = {}", millions(self.flops_baseline));
        let _ = writeln!(s, "flops_pruned = {}", millions(self.flops_pruned));
        let _ = writeln!(s, "flops_drop_pct = {:.2}", self.flops_drop_pct());
        let _ = writeln!(s, "params_baseline = {}", millions(self.params_baseline));
        let _ = writeln!(s, "params_pruned = {}", millions(self.params_pruned));
        let _ = writeln!(s, "params_drop_pct = {:.2}", self.params_drop_pct());
        let _ = writeln!(s, "flops_baseline_macs = {}", self.flops_baseline);
        let _ = writeln!(s, "flops_pruned_macs = {}", self.flops_pruned);
        let _ = writeln!(s, "params_baseline_count = {}", self.params_baseline);
        let _ = writeln!(s, "params_pruned_count = {}", self.params_pruned);
        if let Some(p) = self.sfp_convention_flops_drop_pct {
            let _ = writeln!(s, "sfp_convention_flops_drop_pct = {p:.2}");
        }
        s
    }

    pub const CSV_HEADER: &'static str = "method,arch,blocks_total,blocks_kept,flops_baseline,flops_pruned,flops_drop_pct,params_baseline,params_pruned,params_drop_pct,sfp_convention_flops_drop_pct";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.2},{},{},{:.2},{}",
            self.method,
            self.arch,
            self.blocks_total,
            self.blocks_kept,
            self.flops_baseline,
            self.flops_pruned,
            self.flops_drop_pct(),
            self.params_baseline,
            self.params_pruned,
            self.params_drop_pct(),
            self.sfp_convention_flops_drop_pct
                .map(|p| format!("{p:.2}"))
                .unwrap_or_default()
        )
    }
}

/// Largest elementwise logit difference between the masked gated network and
/// its compact export, over a batch of inputs (eval-mode normalization).
pub fn verify_equivalence(net: &GatedNetwork, mask: &GateMask, compact: &CompactModel, inputs: &Tensor) -> Result<f32> {
    let (gated, _) = net.infer(inputs, mask)?;
    let plain = compact.infer(inputs)?;
    if gated.shape() != plain.shape() {
        return Err(Error::Contract(format!(
            "logit shapes differ: {:?} vs {:?}",
            gated.shape(),
            plain.shape()
        )));
    }
    Ok(gated.max_abs_diff(&plain))
}
