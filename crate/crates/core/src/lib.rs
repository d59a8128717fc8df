//! Automatic block-wise pruning for residual CNNs.
//!
//! Every residual block carries a small gating module that scores it with a
//! mark in `(0, 1)`. Marks are summed over the training set, and the blocks
//! with the lowest totals are removed a few at a time. After each removal the
//! network is retrained with the previous iteration as its distillation
//! teacher. Once enough blocks are gone, the survivors are fixed and
//! fine-tuned. Finally the gates and pruned blocks are stripped to give a
//! plain compact network.
//!
//! The crate is organised along that pipeline:
//!
//! * [`netcore`]: network specs, gate masks and the gated forward pass;
//! * [`gates`]: convolutional and recurrent gating modules;
//! * [`pruner`]: mark ledger and the voting selection rule;
//! * [`schedule`]: losses and the three-stage training procedure;
//! * [`compact`]: export, FLOPs/parameter accounting and reports;
//! * [`sfp`]: soft filter pruning on top of a compact model;
//! * [`data`]: CIFAR binary batches and synthetic datasets;
//! * [`checkpoint`]: the versioned binary container.
//!
//! Numerics live in [`tensor`] and [`autograd`]: a small, single-threaded,
//! deterministic reverse-mode tape.

pub mod autograd;
pub mod checkpoint;
pub mod compact;
pub mod data;
pub mod error;
pub mod gates;
pub mod netcore;
pub mod optim;
pub mod params;
pub mod pruner;
pub mod schedule;
pub mod sfp;
pub mod tensor;

pub use error::{Error, Result};

/// The guide's chapters, compiled so their snippets run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/networks.md")]
    mod networks {}
    #[doc = include_str!("../../../book/src/marks.md")]
    mod marks {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/compact.md")]
    mod compact {}
    #[doc = include_str!("../../../book/src/sfp.md")]
    mod sfp {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
