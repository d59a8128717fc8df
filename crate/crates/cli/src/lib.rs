//! Library half of the `abp` binary: configuration, run directories and the
//! five subcommands. `main.rs` only parses flags and maps errors to exit codes.

pub mod commands;
pub mod config;
pub mod rundir;

use std::fmt;

use abp_core::data::{load_cifar_files, synthetic_generate, CifarOptions, Dataset, SyntheticSpec};
use abp_core::netcore::LayerShape;

use crate::config::DataConfig;

/// Exit status 1 for [`CliError::Usage`], 2 for [`CliError::Runtime`].
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<abp_core::Error> for CliError {
    fn from(e: abp_core::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Training and evaluation sets described by `cfg`, for networks taking
/// `input`-shaped images.
pub fn load_data(cfg: &DataConfig, input: LayerShape) -> CliResult<(Dataset, Dataset)> {
    match cfg.source.as_str() {
        "synthetic" => {
            if input.height != input.width {
                return Err(CliError::Usage("synthetic data needs square inputs".into()));
            }
            let ds = synthetic_generate(&SyntheticSpec {
                num_classes: cfg.classes,
                samples_per_class: cfg.samples_per_class,
                image_size: input.height,
                seed: cfg.seed,
                blob_separation: cfg.separation,
            });
            let train = limit(ds, cfg.limit);
            Ok((train.clone(), train))
        }
        source => {
            let mut opts = if source == "cifar100" {
                CifarOptions::cifar100()
            } else {
                CifarOptions::cifar10()
            };
            opts.norm = cfg.norm;
            if opts.image_shape != input {
                return Err(CliError::Usage(format!(
                    "{source} images are {} but the network expects {input}",
                    opts.image_shape
                )));
            }
            let train = limit(load_cifar_files(&cfg.train, &opts)?, cfg.limit);
            let test = if cfg.test.is_empty() {
                train.clone()
            } else {
                let mut t = load_cifar_files(&cfg.test, &opts)?;
                t.norm = train.norm.clone();
                t
            };
            Ok((train, test))
        }
    }
}

fn limit(ds: Dataset, n: Option<usize>) -> Dataset {
    match n {
        Some(n) if n < ds.len() => ds.subset(&(0..n).collect::<Vec<_>>()),
        _ => ds,
    }
}
