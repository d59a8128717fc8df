use std::path::PathBuf;
use std::process::ExitCode;

use abp_cli::commands::{cmd_eval, cmd_export, cmd_flops, cmd_report, cmd_train, TrainStart};
use abp_cli::config::{ConfigFile, DataConfig, Overrides, Profile, RunConfig, SEED_ENV};
use abp_cli::CliResult;
use abp_core::data::NormMode;
use abp_core::gates::GateKind;
use abp_core::netcore::Arch;
use clap::{Args, Parser, Subcommand};

/// Automatic block-wise pruning for residual CNNs.
#[derive(Parser)]
#[command(name = "abp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, prune and fine-tune; writes a run directory.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Print the compression report of a checkpoint.
    Report {
        checkpoint: PathBuf,
        /// Emit a CSV header and row instead of key = value lines.
        #[arg(long)]
        csv: bool,
    },
    /// Top-1 accuracy of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Remove gates and pruned blocks from a finished checkpoint.
    Export {
        checkpoint: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// FLOPs and parameter counts for an architecture and pruning ratio.
    Flops {
        #[arg(long, default_value = "rn32")]
        arch: Arch,
        #[arg(long, default_value_t = 0.0)]
        gamma: f64,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        /// Also report the composed drop after filter pruning at this rate.
        #[arg(long)]
        sfp_rate: Option<f64>,
        #[arg(long)]
        csv: bool,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    profile: Option<Profile>,
    #[arg(long)]
    arch: Option<Arch>,
    #[arg(long)]
    gate: Option<GateKind>,
    /// Fraction of blocks to prune.
    #[arg(long)]
    gamma: Option<f64>,
    /// Blocks pruned per iteration.
    #[arg(long)]
    k: Option<usize>,
    /// Epochs as `stage1,stage2,stage3` (stage 2 per pruning iteration).
    #[arg(long, value_parser = parse_epochs)]
    epochs: Option<(usize, usize, usize)>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Follow block pruning with soft filter pruning at this rate.
    #[arg(long)]
    sfp_rate: Option<f64>,
    #[arg(long)]
    sfp_epochs: Option<usize>,
    /// Parent directory of run directories.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    run_id: Option<String>,
    /// `synthetic`, `cifar10` or `cifar100`.
    #[arg(long)]
    data_source: Option<String>,
    /// CIFAR training batch files.
    #[arg(long = "data", num_args = 1..)]
    data_train: Vec<PathBuf>,
    /// CIFAR evaluation batch files.
    #[arg(long = "test-data", num_args = 1..)]
    data_test: Vec<PathBuf>,
    /// Synthetic samples per class.
    #[arg(long)]
    samples_per_class: Option<usize>,
    /// Continue a run from one of its gated checkpoints.
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    /// `synthetic`, `cifar10` or `cifar100`.
    #[arg(long, default_value = "synthetic")]
    data_source: String,
    #[arg(long = "data", num_args = 1..)]
    data: Vec<PathBuf>,
    /// `canonical` or `computed` normalization statistics.
    #[arg(long, value_parser = parse_norm)]
    norm: Option<NormMode>,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    samples_per_class: usize,
    #[arg(long, default_value_t = 10.0)]
    separation: f32,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
}

fn parse_epochs(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err("expected three comma-separated epoch counts".into()),
    }
}

fn parse_norm(s: &str) -> Result<NormMode, String> {
    match s {
        "canonical" => Ok(NormMode::Canonical),
        "computed" => Ok(NormMode::Computed),
        other => Err(format!("unknown normalization {other:?} (expected canonical|computed)")),
    }
}

fn train(args: TrainArgs) -> CliResult<String> {
    let start = match args.resume {
        Some(path) => TrainStart::Resume(path),
        None => {
            let file = match &args.config {
                Some(p) => ConfigFile::read(p)?,
                None => ConfigFile::default(),
            };
            let flags = Overrides {
                profile: args.profile,
                arch: args.arch,
                gate: args.gate,
                out_dir: args.out,
                run_id: args.run_id,
                gamma: args.gamma,
                k: args.k,
                epochs: args.epochs,
                batch_size: args.batch_size,
                seed: args.seed,
                sfp_rate: args.sfp_rate,
                sfp_epochs: args.sfp_epochs,
                data_train: args.data_train,
                data_test: args.data_test,
                data_source: args.data_source,
                samples_per_class: args.samples_per_class,
            };
            let env_seed = std::env::var(SEED_ENV).ok();
            TrainStart::Fresh(RunConfig::resolve(file, &flags, env_seed.as_deref())?)
        }
    };
    let outcome = cmd_train(start)?;
    let mut out = outcome.report.to_kv();
    out.push_str(&format!("final_accuracy = {:.4}\n", outcome.final_accuracy));
    out.push_str(&format!("run_dir = {}\n", outcome.run_dir.display()));
    Ok(out)
}

fn run(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::Train(args) => train(args),
        Command::Report { checkpoint, csv } => cmd_report(&checkpoint, csv),
        Command::Eval(a) => {
            let data = DataConfig {
                source: a.data_source,
                train: a.data,
                test: Vec::new(),
                norm: a.norm.unwrap_or_default(),
                limit: None,
                classes: a.classes,
                samples_per_class: a.samples_per_class,
                separation: a.separation,
                seed: a.data_seed,
            };
            let acc = cmd_eval(&a.checkpoint, &data, a.batch_size.max(1))?;
            Ok(format!("accuracy = {acc:.4}\n"))
        }
        Command::Export { checkpoint, out } => {
            let c = cmd_export(&checkpoint, &out)?;
            Ok(format!("blocks_kept = {}\nwrote = {}\n", c.spec().len(), out.display()))
        }
        Command::Flops {
            arch,
            gamma,
            classes,
            sfp_rate,
            csv,
        } => cmd_flops(arch, classes, gamma, sfp_rate, csv),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use abp_cli::CliError;

    #[test]
    fn epochs_flag() {
        assert_eq!(parse_epochs("5,3,5"), Ok((5, 3, 5)));
        assert!(parse_epochs("5,3").is_err());
        assert!(parse_epochs("a,b,c").is_err());
    }

    #[test]
    fn usage_errors_map_to_one() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 1);
    }
}
