//! Stochastic gradient descent with momentum and L2 weight decay.

use serde::{Deserialize, Serialize};

use crate::autograd::{BnUpdate, Gradients};
use crate::params::{ParamId, ParamKind, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// Heavy-ball SGD: `v ← μ·v + (g + λ·w)`, `w ← w − lr·v`.
///
/// Only parameters that received a gradient are touched, so blocks that were
/// skipped in the forward pass keep their exact values.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Option<Vec<f32>>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: Vec::new(),
        }
    }

    /// Drops all momentum buffers.
    pub fn reset(&mut self) {
        self.velocity.clear();
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f32) {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let mut ids: Vec<ParamId> = grads.iter().map(|(&id, _)| id).collect();
        ids.sort_unstable();
        let SgdConfig {
            momentum,
            weight_decay,
        } = self.config;
        for id in ids {
            if store.param(id).kind != ParamKind::Trainable {
                continue;
            }
            let g = grads.get(id).expect("id taken from grads");
            let w = store.get_mut(id).data_mut();
            let v = self.velocity[id.0].get_or_insert_with(|| vec![0.0; w.len()]);
            for ((wi, vi), &gi) in w.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vi = momentum * *vi + gi + weight_decay * *wi;
                *wi -= lr * *vi;
            }
        }
    }
}

pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        u.apply(store);
    }
}
