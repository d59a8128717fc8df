use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use abp_core::checkpoint::{self, Checkpoint, Model, Phase};
use abp_core::compact::{export_compact, remove_blocks, CompactModel, CompressionReport};
use abp_core::gates::GateConfig;
use abp_core::netcore::{build_network, Arch, GateMask};
use abp_core::pruner::{blocks_to_prune, mark_dump, MarkLedger};
use abp_core::schedule::{evaluate, run_pipeline, MaskedNetwork, TrainContext};
use abp_core::sfp::{run_sfp, sfp_convention_flops, sfp_report};
use anyhow::{anyhow, Context};
use log::info;

use crate::config::{DataConfig, RunConfig};
use crate::rundir::{new_run_dir, RunLock, RunObserver, COMPACT_FILE, CONFIG_FILE};
use crate::{load_data, CliError, CliResult};

const SFP_DROP_KEY: &str = "sfp_convention_flops_drop_pct";

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub report: CompressionReport,
    pub final_accuracy: f64,
    pub pruned: Vec<usize>,
}

/// Where `cmd_train` starts from.
pub enum TrainStart {
    Fresh(RunConfig),
    /// A gated checkpoint inside an existing run directory; the run's saved
    /// configuration is reused.
    Resume(PathBuf),
}

fn run_meta(cfg: &RunConfig, id: &str) -> Vec<(String, String)> {
    vec![
        ("run_id".into(), id.into()),
        ("arch".into(), cfg.arch.to_string()),
        ("seed".into(), cfg.train.seed.to_string()),
        ("gamma".into(), cfg.train.gamma.to_string()),
    ]
}

fn load_gated(path: &Path) -> CliResult<(MaskedNetwork, Checkpoint)> {
    let ckpt = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    match &ckpt.model {
        Model::Gated { net, mask } => Ok((
            MaskedNetwork {
                net: net.clone(),
                mask: mask.clone(),
            },
            ckpt,
        )),
        Model::Compact(_) => Err(CliError::Runtime(anyhow!(
            "{} holds an exported model; training resumes from gated checkpoints only",
            path.display()
        ))),
    }
}

/// Runs every remaining stage and writes the run directory.
pub fn cmd_train(start: TrainStart) -> CliResult<TrainOutcome> {
    let (cfg, id, dir, lock, resume) = match start {
        TrainStart::Fresh(cfg) => {
            let (id, dir) = new_run_dir(&cfg.out_dir, cfg.run_id.as_deref())?;
            let lock = RunLock::acquire(&dir)?;
            fs::write(dir.join(CONFIG_FILE), cfg.to_toml())?;
            (cfg, id, dir, lock, None)
        }
        TrainStart::Resume(path) => {
            let dir = path
                .parent()
                .filter(|d| d.join(CONFIG_FILE).exists())
                .ok_or_else(|| CliError::Usage(format!("{} is not inside a run directory", path.display())))?
                .to_path_buf();
            let lock = RunLock::acquire(&dir)?;
            let cfg = RunConfig::from_toml(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
            let id = dir
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix("run-"))
                .unwrap_or("resumed")
                .to_string();
            let resumed = load_gated(&path)?;
            (cfg, id, dir, lock, Some(resumed))
        }
    };

    let input = cfg.arch.spec(2).input_shape;
    let (train, eval) = load_data(&cfg.data, input)?;
    let (mut model, phase) = match resume {
        Some((model, ckpt)) => {
            if model.net.spec().num_classes != train.num_classes {
                return Err(CliError::Runtime(anyhow!(
                    "checkpoint has {} classes, data has {}",
                    model.net.spec().num_classes,
                    train.num_classes
                )));
            }
            info!("resuming after stage {} iteration {}", ckpt.phase.stage, ckpt.phase.iter);
            (model, ckpt.phase)
        }
        None => {
            let spec = cfg.arch.spec(train.num_classes);
            let net = build_network(spec, GateConfig::of_kind(cfg.gate), cfg.train.seed)?;
            (MaskedNetwork::new(net), Phase::default())
        }
    };

    let mut obs = RunObserver::new(&dir, run_meta(&cfg, &id))?;
    let mut ctx = TrainContext::new(cfg.train.clone(), &train, &eval)?;
    let summary = run_pipeline(&mut model, &mut ctx, &mut obs, phase)?;
    info!("final accuracy {:.4}", summary.final_accuracy);

    let compact = export_compact(&model.net, &model.mask)?;
    let mut ckpt = Checkpoint::new(Model::Compact(compact.clone()), Phase {
        stage: 3,
        iter: 0,
        epochs_done: ctx.epochs_done,
    });
    ckpt.meta.extend(run_meta(&cfg, &id));
    checkpoint::save(dir.join(COMPACT_FILE), &ckpt)?;

    let arch = cfg.arch.to_string();
    let (report, final_accuracy) = match &cfg.sfp {
        None => (
            CompressionReport::for_compact("abp", &arch, &compact),
            summary.final_accuracy,
        ),
        Some(sfp_cfg) => {
            let (small, _) = run_sfp(compact.clone(), &mut ctx, sfp_cfg, &mut obs)?;
            let acc = evaluate(&small, &eval, cfg.train.batch_size)?;
            let report = sfp_report(&arch, &compact, &small, sfp_cfg.rate);
            let mut meta = run_meta(&cfg, &id);
            meta.push(("sfp_rate".into(), sfp_cfg.rate.to_string()));
            if let Some(p) = report.sfp_convention_flops_drop_pct {
                meta.push((SFP_DROP_KEY.into(), p.to_string()));
            }
            RunObserver::new(&dir, meta)?.checkpoint(
                Model::Compact(small),
                Phase {
                    stage: 4,
                    iter: 0,
                    epochs_done: ctx.epochs_done,
                },
                None,
            )?;
            info!("accuracy after filter pruning {acc:.4}");
            (report, acc)
        }
    };

    let mut text = report.to_kv();
    let _ = writeln!(text, "final_accuracy = {final_accuracy:.4}");
    fs::write(dir.join("report.txt"), text)?;
    fs::write(
        dir.join("report.csv"),
        format!("{}\n{}\n", CompressionReport::CSV_HEADER, report.csv_row()),
    )?;
    drop(lock);
    Ok(TrainOutcome {
        run_dir: dir,
        report,
        final_accuracy,
        pruned: model.mask.pruned(),
    })
}

/// Report and, when the checkpoint has them, mark totals.
pub fn report_for(ckpt: &Checkpoint) -> CliResult<(CompressionReport, Option<String>)> {
    let arch = ckpt.meta.get("arch").cloned().unwrap_or_else(|| "custom".into());
    match &ckpt.model {
        Model::Gated { net, mask } => {
            let pruned = mask.pruned();
            let (kept, _) = remove_blocks(net.spec(), &pruned)?;
            let method = if pruned.is_empty() { "baseline" } else { "abp" };
            let report = CompressionReport::new(method, &arch, net.spec(), &kept);
            let marks = ckpt.mark_sums.as_ref().map(|sums| {
                let sums = sums.iter().map(|&s| (!s.is_nan()).then_some(s)).collect();
                mark_dump(net.spec(), mask, &MarkLedger::from_sums(sums, 1))
            });
            Ok((report, marks))
        }
        Model::Compact(c) => {
            let mut report = if ckpt.phase.stage == 4 {
                CompressionReport::for_compact("abp-sfp", &arch, c)
            } else if c.spec().len() == c.source_spec.len() {
                CompressionReport::for_compact("baseline", &arch, c)
            } else {
                CompressionReport::for_compact("abp", &arch, c)
            };
            report.sfp_convention_flops_drop_pct = ckpt.meta.get(SFP_DROP_KEY).and_then(|v| v.parse().ok());
            Ok((report, None))
        }
    }
}

pub fn cmd_report(path: &Path, csv: bool) -> CliResult<String> {
    let ckpt = checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?;
    let (report, marks) = report_for(&ckpt)?;
    if csv {
        return Ok(format!("{}\n{}\n", CompressionReport::CSV_HEADER, report.csv_row()));
    }
    let mut out = report.to_kv();
    if let Some(m) = marks {
        out.push('\n');
        out.push_str(&m);
    }
    Ok(out)
}

/// Top-1 accuracy of a gated or compact checkpoint.
pub fn cmd_eval(path: &Path, data: &DataConfig, batch_size: usize) -> CliResult<f64> {
    let ckpt = checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?;
    let spec = ckpt.model.spec().clone();
    let (_, eval) = load_data(data, spec.input_shape)?;
    let acc = match ckpt.model {
        Model::Gated { net, mask } => evaluate(&MaskedNetwork { net, mask }, &eval, batch_size)?,
        Model::Compact(c) => evaluate(&c, &eval, batch_size)?,
    };
    Ok(acc)
}

/// Strips gates and pruned blocks from a finished gated checkpoint.
pub fn cmd_export(path: &Path, out: &Path) -> CliResult<CompactModel> {
    let ckpt = checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?;
    let compact = match ckpt.model {
        Model::Gated { net, mask } => export_compact(&net, &mask)?,
        Model::Compact(c) => c,
    };
    let mut saved = Checkpoint::new(Model::Compact(compact.clone()), ckpt.phase);
    saved.meta = ckpt.meta;
    checkpoint::save(out, &saved)?;
    Ok(compact)
}

/// Counts for `arch` with `floor(γ·N)` removable blocks gone. All removable
/// blocks of these networks cost the same, so the choice of blocks does not
/// change the numbers.
pub fn flops_report(arch: Arch, classes: usize, gamma: f64, sfp_rate: Option<f64>) -> CliResult<CompressionReport> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(CliError::Usage(format!("pruning ratio {gamma} outside [0, 1)")));
    }
    let spec = arch.spec(classes);
    let prunable = GateMask::initial(&spec).prunable();
    let n = blocks_to_prune(spec.len(), gamma).min(prunable.len());
    let (kept, _) = remove_blocks(&spec, &prunable[..n])?;
    let method = if n == 0 { "baseline" } else { "abp" };
    let mut report = CompressionReport::new(method, &arch.to_string(), &spec, &kept);
    if let Some(rate) = sfp_rate {
        if !(0.0..1.0).contains(&rate) {
            return Err(CliError::Usage(format!("filter pruning rate {rate} outside [0, 1)")));
        }
        report.method = "abp-sfp".into();
        let composed = sfp_convention_flops(&kept, rate).round() as u64;
        report.sfp_convention_flops_drop_pct = Some(abp_core::compact::drop_pct(report.flops_baseline, composed));
    }
    Ok(report)
}

pub fn cmd_flops(arch: Arch, classes: usize, gamma: f64, sfp_rate: Option<f64>, csv: bool) -> CliResult<String> {
    let report = flops_report(arch, classes, gamma, sfp_rate)?;
    Ok(if csv {
        format!("{}\n{}\n", CompressionReport::CSV_HEADER, report.csv_row())
    } else {
        report.to_kv()
    })
}
