//! Soft filter pruning on a compact model.
//!
//! Within each residual block only the first convolution loses output
//! filters; the second convolution's output must keep the residual width, so
//! it only loses the matching input channels. During fine-tuning the
//! `floor(rate·C)` lowest-norm filters of each pruned layer are zeroed after
//! every `cadence` epochs but stay trainable, so they may grow back. At the
//! end the last selection is made permanent and removed.

use log::info;
use serde::{Deserialize, Serialize};

use crate::compact::{count_flops, drop_pct, CompactModel, CompressionReport};
use crate::error::{Error, Result};
use crate::netcore::{BlockSpec, NetworkSpec};
use crate::schedule::{Observer, TrainContext};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SfpConfig {
    pub rate: f64,
    pub epochs: usize,
    pub cadence: usize,
}

impl Default for SfpConfig {
    fn default() -> Self {
        Self {
            rate: 0.3,
            epochs: 3,
            cadence: 1,
        }
    }
}

impl SfpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rate) {
            return Err(Error::Config(format!("filter pruning rate {} outside [0, 1)", self.rate)));
        }
        if self.cadence == 0 {
            return Err(Error::Config("masking cadence must be at least 1 epoch".into()));
        }
        Ok(())
    }
}

/// `floor(rate·C)`.
pub fn filters_to_zero(channels: usize, rate: f64) -> usize {
    (rate * channels as f64 + 1e-9).floor() as usize
}

/// L2 norm of every output filter of each block's first convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterNorms {
    pub layers: Vec<Vec<f32>>,
}

pub fn filter_norms(model: &CompactModel) -> FilterNorms {
    let layers = model
        .backbone
        .blocks
        .iter()
        .map(|b| {
            let w = model.store().get(b.conv1);
            w.data()
                .chunks(w.row_len())
                .map(|f| f.iter().map(|v| v * v).sum::<f32>().sqrt())
                .collect()
        })
        .collect();
    FilterNorms { layers }
}

/// Indices of the `n` smallest norms (ties: lower index), ascending.
pub fn smallest_filters(norms: &[f32], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b)));
    let mut chosen = order[..n.min(norms.len())].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Zeroed filters per block, by compact block index.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SfpMask {
    pub zeroed: Vec<Vec<usize>>,
}

/// Ranks filters by norm and zeroes the weights of the smallest ones.
pub fn sfp_mask_step(model: &mut CompactModel, cfg: &SfpConfig) -> Result<SfpMask> {
    cfg.validate()?;
    let norms = filter_norms(model);
    let mut zeroed = Vec::with_capacity(norms.layers.len());
    for (b, layer) in norms.layers.iter().enumerate() {
        let chosen = smallest_filters(layer, filters_to_zero(layer.len(), cfg.rate));
        let id = model.backbone.blocks[b].conv1;
        let w = model.store_mut().get_mut(id);
        let row = w.row_len();
        for &f in &chosen {
            w.data_mut()[f * row..(f + 1) * row].fill(0.0);
        }
        zeroed.push(chosen);
    }
    Ok(SfpMask { zeroed })
}

/// Makes the masked channels exactly zero after normalization by also
/// clearing their scale and shift. A zero filter alone still leaves a
/// constant `β − γ·μ/σ` channel; clearing `γ` and `β` removes it, so the
/// hardened model is what [`sfp_finalize`] reproduces.
pub fn harden(model: &mut CompactModel, mask: &SfpMask) {
    for (b, chosen) in mask.zeroed.iter().enumerate() {
        let blk = model.backbone.blocks[b].clone();
        let store = model.store_mut();
        let row = store.get(blk.conv1).row_len();
        for &f in chosen {
            store.get_mut(blk.conv1).data_mut()[f * row..(f + 1) * row].fill(0.0);
            store.get_mut(blk.bn1.gamma).data_mut()[f] = 0.0;
            store.get_mut(blk.bn1.beta).data_mut()[f] = 0.0;
        }
    }
}

fn keep_rows(t: &Tensor, keep: &[usize]) -> Tensor {
    let row = t.row_len();
    let mut shape = t.shape().to_vec();
    shape[0] = keep.len();
    let data = keep
        .iter()
        .flat_map(|&r| t.data()[r * row..(r + 1) * row].iter().copied())
        .collect();
    Tensor::new(shape, data)
}

/// Keeps input channels `keep` of an `[out, in, k, k]` kernel.
fn keep_inputs(t: &Tensor, keep: &[usize]) -> Tensor {
    let s = t.shape();
    let (out, inp, kk) = (s[0], s[1], s[2] * s[3]);
    let mut data = Vec::with_capacity(out * keep.len() * kk);
    for o in 0..out {
        for &i in keep {
            let start = (o * inp + i) * kk;
            data.extend_from_slice(&t.data()[start..start + kk]);
        }
    }
    Tensor::new(vec![out, keep.len(), s[2], s[3]], data)
}

/// Physically removes the masked filters of each first convolution together
/// with their normalization entries and the second convolution's matching
/// input channels. Agrees with the [`harden`]ed model.
pub fn sfp_finalize(model: &CompactModel, mask: &SfpMask) -> Result<CompactModel> {
    if mask.zeroed.len() != model.spec().len() {
        return Err(Error::Contract(format!(
            "filter mask covers {} blocks, model has {}",
            mask.zeroed.len(),
            model.spec().len()
        )));
    }
    let mut keeps = Vec::with_capacity(mask.zeroed.len());
    let mut blocks = Vec::with_capacity(mask.zeroed.len());
    for (b, chosen) in model.spec().blocks.iter().zip(&mask.zeroed) {
        let keep: Vec<usize> = (0..b.mid_channels).filter(|c| !chosen.contains(c)).collect();
        if keep.is_empty() {
            return Err(Error::Contract(format!("block {} would lose every filter", b.index)));
        }
        blocks.push(BlockSpec {
            mid_channels: keep.len(),
            ..b.clone()
        });
        keeps.push(keep);
    }
    let spec = NetworkSpec {
        blocks,
        ..model.spec().clone()
    };
    let mut out = CompactModel::skeleton(spec, model.provenance.clone(), model.source_spec.clone())?;
    let src = model.store();
    for (b, keep) in keeps.iter().enumerate() {
        let (sb, db) = (&model.backbone.blocks[b], out.backbone.blocks[b].clone());
        let store = out.store_mut();
        *store.get_mut(db.conv1) = keep_rows(src.get(sb.conv1), keep);
        for (s, d) in [
            (sb.bn1.gamma, db.bn1.gamma),
            (sb.bn1.beta, db.bn1.beta),
            (sb.bn1.running_mean, db.bn1.running_mean),
            (sb.bn1.running_var, db.bn1.running_var),
        ] {
            *store.get_mut(d) = keep_rows(src.get(s), keep);
        }
        *store.get_mut(db.conv2) = keep_inputs(src.get(sb.conv2), keep);
    }
    // everything outside the first conv / bn1 / second conv is copied as is
    let shaped: Vec<_> = out.store().iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in shaped {
        let sid = src.find(&name).expect("same parameter names");
        if out.store().get(id).shape() == src.get(sid).shape() && !touched(&name) {
            *out.store_mut().get_mut(id) = src.get(sid).clone();
        }
    }
    Ok(out)
}

fn touched(name: &str) -> bool {
    name.ends_with(".conv1.weight") || name.contains(".bn1.") || name.ends_with(".conv2.weight")
}

/// FLOPs under the accounting used by channel-pruning work for composed
/// runs: with `keep = 1 − rate`, the stem, each first convolution and the
/// classifier scale by `keep` and each second convolution by `keep²`.
pub fn sfp_convention_flops(spec: &NetworkSpec, rate: f64) -> f64 {
    let keep = 1.0 - rate;
    let bd = crate::compact::flops_breakdown(spec);
    let blocks: f64 = spec
        .blocks
        .iter()
        .map(|b| {
            let hw = (b.out_shape.height * b.out_shape.width) as f64;
            let conv1 = (b.in_shape.channels * b.mid_channels * 9) as f64 * hw;
            let conv2 = (b.mid_channels * b.out_shape.channels * 9) as f64 * hw;
            conv1 * keep + conv2 * keep * keep
        })
        .sum();
    (bd.stem + bd.classifier) as f64 * keep + blocks
}

/// Report for a block-pruned then filter-pruned model. `abp` is the model
/// before filter pruning, `final_model` after.
pub fn sfp_report(arch: &str, abp: &CompactModel, final_model: &CompactModel, rate: f64) -> CompressionReport {
    let mut r = CompressionReport::new("abp-sfp", arch, &abp.source_spec, final_model.spec());
    let base = count_flops(&abp.source_spec);
    r.sfp_convention_flops_drop_pct = Some(drop_pct(base, sfp_convention_flops(abp.spec(), rate).round() as u64));
    r
}

/// Fine-tunes with periodic soft masking, then hardens and removes the last
/// selection. Returns the structurally smaller model and the final mask.
/// Epochs are logged as stage 4 at the stage-3 learning rate.
pub fn run_sfp(
    mut model: CompactModel,
    ctx: &mut TrainContext<'_>,
    cfg: &SfpConfig,
    obs: &mut dyn Observer,
) -> Result<(CompactModel, SfpMask)> {
    cfg.validate()?;
    let mut mask = sfp_mask_step(&mut model, cfg)?;
    let blocks = model.spec().len();
    for e in 0..cfg.epochs {
        ctx.epoch_and_record(&mut model, (4, 0, e), blocks, None, obs)?;
        if (e + 1) % cfg.cadence == 0 || e + 1 == cfg.epochs {
            mask = sfp_mask_step(&mut model, cfg)?;
        }
    }
    info!(
        "filter pruning removed {} filters",
        mask.zeroed.iter().map(Vec::len).sum::<usize>()
    );
    harden(&mut model, &mask);
    Ok((sfp_finalize(&model, &mask)?, mask))
}
