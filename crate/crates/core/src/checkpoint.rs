//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes            | content                                              |
//! |------------------|------------------------------------------------------|
//! | 8                | magic `ABPCKPT\0`                                    |
//! | 4                | format version (`u32`, currently 1)                  |
//! | 8                | header length `h` (`u64`)                            |
//! | `h`              | UTF-8 TOML header: spec, gates, phase, manifest      |
//! | 8 + n            | block count `n` (`u64`), one state byte per block    |
//! | 4 · Σ sizes      | parameter values as `f32`, manifest order            |
//! | 32               | SHA-256 of everything above                          |
//!
//! State bytes are 0 = active, 1 = pruned, 2 = fixed. A compact model stores
//! all of its blocks as fixed and has no gate section in the header.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compact::CompactModel;
use crate::error::{Error, Result};
use crate::gates::GateConfig;
use crate::netcore::{build_network, BlockState, GateMask, GatedNetwork, NetworkSpec};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ABPCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

/// Where in the training procedure a checkpoint was taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    /// 0 = untrained, 1–3 = completed stage, 4 = channel-pruned.
    pub stage: u8,
    /// Pruning iteration within stage 2 (0 elsewhere).
    pub iter: usize,
    /// Global epoch counter, used to continue the batch-order stream.
    pub epochs_done: u64,
}

#[derive(Debug, Clone)]
pub enum Model {
    Gated { net: GatedNetwork, mask: GateMask },
    Compact(CompactModel),
}

impl Model {
    pub fn spec(&self) -> &NetworkSpec {
        match self {
            Model::Gated { net, .. } => net.spec(),
            Model::Compact(c) => c.spec(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            Model::Gated { net, .. } => net.store(),
            Model::Compact(c) => c.store(),
        }
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Gated { net, .. } => net.store_mut(),
            Model::Compact(c) => c.store_mut(),
        }
    }

    fn states(&self) -> Vec<BlockState> {
        match self {
            Model::Gated { mask, .. } => mask.states().to_vec(),
            Model::Compact(c) => vec![BlockState::Fixed; c.spec().len()],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub phase: Phase,
    /// Free-form provenance such as seed and run id.
    pub meta: BTreeMap<String, String>,
    /// Last mark totals, `NaN` where a block had no mark.
    pub mark_sums: Option<Vec<f64>>,
}

impl Checkpoint {
    pub fn new(model: Model, phase: Phase) -> Self {
        Self {
            model,
            phase,
            meta: BTreeMap::new(),
            mark_sums: None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    phase: Phase,
    meta: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mark_sums: Option<Vec<f64>>,
    exempt: Vec<usize>,
    spec: NetworkSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gates: Option<GateConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source_spec: Option<NetworkSpec>,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    buffer: bool,
    shape: Vec<usize>,
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Checkpoint {
        version: FORMAT_VERSION,
        detail: detail.into(),
    }
}

pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let model = &ckpt.model;
    let (kind, gates, provenance, source_spec, exempt) = match model {
        Model::Gated { net, mask } => (
            "gated",
            Some(net.gate_config.clone()),
            None,
            None,
            mask.exempt().iter().copied().collect(),
        ),
        Model::Compact(c) => (
            "compact",
            None,
            Some(c.provenance.clone()),
            Some(c.source_spec.clone()),
            Vec::new(),
        ),
    };
    let header = Header {
        kind: kind.into(),
        phase: ckpt.phase,
        meta: ckpt.meta.clone(),
        mark_sums: ckpt.mark_sums.clone(),
        exempt,
        spec: model.spec().clone(),
        gates,
        provenance,
        source_spec,
        params: model
            .store()
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                buffer: p.kind == ParamKind::Buffer,
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let text = toml::to_string(&header).map_err(|e| corrupt(format!("header encoding: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let states = model.states();
    out.extend_from_slice(&(states.len() as u64).to_le_bytes());
    out.extend(states.iter().map(|s| match s {
        BlockState::Active => 0u8,
        BlockState::Pruned => 1,
        BlockState::Fixed => 2,
    }));
    for (_, p) in model.store().iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest: [u8; 32] = Sha256::digest(&out).into();
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(corrupt(format!("truncated while reading {what} at byte {}", self.pos))),
        }
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let b = self.take(8, what)?;
        usize::try_from(u64::from_le_bytes(b.try_into().expect("8 bytes")))
            .map_err(|_| corrupt(format!("{what} does not fit in memory")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint {
            version: 0,
            detail: "not a checkpoint (bad magic)".into(),
        });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint {
            version,
            detail: format!("unsupported format version (this build reads {FORMAT_VERSION})"),
        });
    }
    if bytes.len() < 12 + 8 + 32 {
        return Err(corrupt("file too short"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let actual: [u8; 32] = Sha256::digest(body).into();
    if actual != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let mut r = Reader { bytes: body, pos: 12 };
    let hlen = r.u64("header length")?;
    let text = std::str::from_utf8(r.take(hlen, "header")?).map_err(|e| corrupt(format!("header is not UTF-8: {e}")))?;
    let header: Header = toml::from_str(text).map_err(|e| corrupt(format!("header: {e}")))?;
    let n = r.u64("block count")?;
    let states = r
        .take(n, "block states")?
        .iter()
        .map(|b| match b {
            0 => Ok(BlockState::Active),
            1 => Ok(BlockState::Pruned),
            2 => Ok(BlockState::Fixed),
            other => Err(corrupt(format!("unknown block state byte {other}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    if n != header.spec.len() {
        return Err(corrupt(format!("{n} block states for {} blocks", header.spec.len())));
    }
    let mut model = match header.kind.as_str() {
        "gated" => {
            let gates = header.gates.ok_or_else(|| corrupt("gated checkpoint without gate config"))?;
            let net = build_network(header.spec.clone(), gates, 0)?;
            let mask = GateMask::from_parts(states, header.exempt.into_iter().collect())?;
            Model::Gated { net, mask }
        }
        "compact" => {
            let provenance = header.provenance.ok_or_else(|| corrupt("compact checkpoint without provenance"))?;
            let source = header.source_spec.ok_or_else(|| corrupt("compact checkpoint without source spec"))?;
            Model::Compact(CompactModel::skeleton(header.spec.clone(), provenance, source)?)
        }
        other => return Err(corrupt(format!("unknown model kind {other:?}"))),
    };
    let store = model.store_mut();
    if store.len() != header.params.len() {
        return Err(corrupt(format!(
            "manifest lists {} tensors, architecture declares {}",
            header.params.len(),
            store.len()
        )));
    }
    for (i, entry) in header.params.iter().enumerate() {
        let id = crate::params::ParamId(i);
        let p = store.param(id);
        let kind_ok = (p.kind == ParamKind::Buffer) == entry.buffer;
        if p.name != entry.name || p.value.shape() != entry.shape.as_slice() || !kind_ok {
            return Err(corrupt(format!(
                "manifest entry {i} ({}) does not match the architecture ({})",
                entry.name, p.name
            )));
        }
        let len: usize = entry.shape.iter().product();
        let raw = r.take(4 * len, &entry.name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        *store.get_mut(id) = Tensor::new(entry.shape.clone(), data);
    }
    if r.pos != body.len() {
        return Err(corrupt(format!("{} unexpected trailing bytes", body.len() - r.pos)));
    }
    Ok(Checkpoint {
        model,
        phase: header.phase,
        meta: header.meta,
        mark_sums: header.mark_sums,
    })
}

pub fn save(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    // write-then-rename so a crash never leaves a half-written checkpoint
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, to_bytes(ckpt)?)?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}

/// `stage<k>-iter<j>.ckpt`
pub fn checkpoint_name(stage: u8, iter: usize) -> String {
    format!("stage{stage}-iter{iter}.ckpt")
}
