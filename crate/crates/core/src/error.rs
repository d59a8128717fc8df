use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch between block {from} and block {to}: {detail}")]
    SpecShape {
        from: usize,
        to: usize,
        detail: String,
    },
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("input shape mismatch at block {block}: expected {expected:?}, got {got:?}")]
    InputShape {
        block: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("block {0} is still gate-controlled; fix all blocks before exporting")]
    ExportBeforeFixing(usize),
    #[error("pruning exhausted: no prunable block left ({unpruned} unpruned, target {target})")]
    PruningExhausted { unpruned: usize, target: usize },
    #[error("parse error at byte offset {offset}: {detail}")]
    Parse { offset: usize, detail: String },
    #[error("checkpoint error (format version {version}): {detail}")]
    Checkpoint { version: u32, detail: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
