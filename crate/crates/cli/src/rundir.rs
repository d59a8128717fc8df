//! Run directory layout and the observer that fills it.
//!
//! ```text
//! run-<id>/
//!   .lock                 held while a process owns the run
//!   config.toml           resolved configuration
//!   metrics.log           one line per epoch, appended
//!   marks-iter<j>.txt     mark totals before each pruning iteration
//!   stage<k>-iter<j>.ckpt gated checkpoints (stage 4: filter-pruned compact)
//!   compact.ckpt          exported model
//!   report.txt / report.csv
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use abp_core::checkpoint::{self, Checkpoint, Model, Phase};
use abp_core::pruner::MarkLedger;
use abp_core::schedule::{EpochRecord, MaskedNetwork, Observer};
use anyhow::Context;

use crate::{CliError, CliResult};

pub const LOCK_FILE: &str = ".lock";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.log";
pub const COMPACT_FILE: &str = "compact.ckpt";

/// Exclusive ownership of a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> CliResult<Self> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Runtime(anyhow::anyhow!(
                "{} is locked by another run (remove {} if that run is gone)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// `out/run-<id>`; without an id, the first unused `run-<n>`.
pub fn new_run_dir(out: &Path, id: Option<&str>) -> CliResult<(String, PathBuf)> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let id = match id {
        Some(id) => id.to_string(),
        None => (1..)
            .map(|n| n.to_string())
            .find(|n| !out.join(format!("run-{n}")).exists())
            .expect("unbounded range"),
    };
    let dir = out.join(format!("run-{id}"));
    if dir.join(CONFIG_FILE).exists() {
        return Err(CliError::Usage(format!(
            "{} already holds a run; pass --resume with one of its checkpoints or choose another id",
            dir.display()
        )));
    }
    fs::create_dir_all(&dir)?;
    Ok((id, dir))
}

/// Writes metrics, mark dumps and checkpoints as the pipeline reports them.
pub struct RunObserver {
    dir: PathBuf,
    metrics: File,
    meta: Vec<(String, String)>,
}

impl RunObserver {
    pub fn new(dir: &Path, meta: Vec<(String, String)>) -> CliResult<Self> {
        let metrics = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join(METRICS_FILE))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics,
            meta,
        })
    }

    pub fn checkpoint(&self, model: Model, phase: Phase, ledger: Option<&MarkLedger>) -> abp_core::Result<PathBuf> {
        let mut ckpt = Checkpoint::new(model, phase);
        ckpt.meta.extend(self.meta.iter().cloned());
        ckpt.mark_sums = ledger.map(|l| l.sums().iter().map(|s| s.unwrap_or(f64::NAN)).collect());
        let path = self.dir.join(checkpoint::checkpoint_name(phase.stage, phase.iter));
        checkpoint::save(&path, &ckpt)?;
        log::info!("wrote {}", path.display());
        Ok(path)
    }
}

impl Observer for RunObserver {
    fn on_epoch(&mut self, record: &EpochRecord) -> abp_core::Result<()> {
        writeln!(self.metrics, "{record}")?;
        Ok(())
    }

    fn on_marks(&mut self, iter: usize, dump: &str) -> abp_core::Result<()> {
        fs::write(self.dir.join(format!("marks-iter{iter}.txt")), dump)?;
        Ok(())
    }

    fn on_checkpoint(&mut self, phase: Phase, model: &MaskedNetwork, ledger: Option<&MarkLedger>) -> abp_core::Result<()> {
        let m = Model::Gated {
            net: model.net.clone(),
            mask: model.mask.clone(),
        };
        self.checkpoint(m, phase, ledger).map(|_| ())
    }
}
