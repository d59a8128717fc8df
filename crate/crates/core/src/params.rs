//! Flat, ordered parameter storage shared by networks, optimizers and checkpoints.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Running statistics; persisted but never differentiated.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Parameters in declaration order. The order is the checkpoint order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

pub const GATE_PREFIX: &str = "gate.";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            kind,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Learnable scalar count, optionally skipping gate parameters.
    pub fn trainable_scalars(&self, include_gates: bool) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .filter(|p| include_gates || !p.name.starts_with(GATE_PREFIX))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn has_gate_params(&self) -> bool {
        self.params.iter().any(|p| p.name.starts_with(GATE_PREFIX))
    }

    /// Overwrite values from another store with identical names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamStore) {
        assert_eq!(self.params.len(), other.params.len());
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            assert_eq!(dst.name, src.name);
            assert_eq!(dst.value.shape(), src.value.shape());
            dst.value = src.value.clone();
        }
    }
}

/// He-normal initialization over fan-out, the usual choice for ReLU conv stacks.
pub fn kaiming_conv(rng: &mut impl Rng, out_c: usize, in_c: usize, k: usize) -> Tensor {
    let std = (2.0 / (out_c * k * k) as f32).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let data = (0..out_c * in_c * k * k).map(|_| normal.sample(rng)).collect();
    Tensor::new(vec![out_c, in_c, k, k], data)
}

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weight and bias of a dense layer.
pub fn uniform_linear(rng: &mut impl Rng, out_f: usize, in_f: usize) -> (Tensor, Tensor) {
    let bound = 1.0 / (in_f as f32).sqrt();
    let w = (0..out_f * in_f).map(|_| rng.random_range(-bound..bound)).collect();
    let b = (0..out_f).map(|_| rng.random_range(-bound..bound)).collect();
    (Tensor::new(vec![out_f, in_f], w), Tensor::new(vec![out_f], b))
}
