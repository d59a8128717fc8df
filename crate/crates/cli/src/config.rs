//! Run configuration: profile defaults, then the TOML file, then flags.

use std::path::{Path, PathBuf};

use abp_core::data::NormMode;
use abp_core::gates::GateKind;
use abp_core::netcore::Arch;
use abp_core::schedule::TrainConfig;
use abp_core::sfp::SfpConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "ABP_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Few epochs on a small synthetic set.
    #[default]
    Desk,
    /// Full-length schedule.
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(format!("unknown profile {other:?} (expected desk|paper)")),
        }
    }
}

/// Where training and evaluation data come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// `synthetic`, `cifar10` or `cifar100`.
    pub source: String,
    /// CIFAR batch files for training.
    pub train: Vec<PathBuf>,
    /// CIFAR batch files for evaluation; the training files when empty.
    pub test: Vec<PathBuf>,
    pub norm: NormMode,
    /// Keep only the first `limit` training records.
    pub limit: Option<usize>,
    pub classes: usize,
    pub samples_per_class: usize,
    pub separation: f32,
    pub seed: u64,
}

impl DataConfig {
    fn for_profile(profile: Profile, arch: Arch) -> Self {
        let micro = arch == Arch::Micro;
        Self {
            source: "synthetic".into(),
            train: Vec::new(),
            test: Vec::new(),
            norm: NormMode::Canonical,
            limit: None,
            classes: if micro { 4 } else { 10 },
            samples_per_class: match (profile, micro) {
                (Profile::Desk, true) => 64,
                (Profile::Desk, false) => 8,
                (Profile::Paper, _) => 500,
            },
            separation: 10.0,
            seed: 0,
        }
    }
}

/// Fully resolved configuration, written to every run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub arch: Arch,
    pub gate: GateKind,
    pub out_dir: PathBuf,
    pub run_id: Option<String>,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub sfp: Option<SfpConfig>,
}

/// What a config file may set. Every key is optional; unknown keys are errors.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub profile: Option<Profile>,
    pub arch: Option<Arch>,
    pub gate: Option<GateKind>,
    pub out_dir: Option<PathBuf>,
    pub run_id: Option<String>,
    #[serde(default)]
    pub train: TrainFile,
    #[serde(default)]
    pub data: DataFile,
    pub sfp: Option<SfpFile>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub stage1_epochs: Option<usize>,
    pub stage2_epochs: Option<usize>,
    pub stage3_epochs: Option<usize>,
    pub lr: Option<f32>,
    pub stage2_lr_factor: Option<f32>,
    pub stage3_lr_factor: Option<f32>,
    pub stage2_decay_epoch: Option<usize>,
    pub stage2_decay_factor: Option<f32>,
    pub momentum: Option<f32>,
    pub weight_decay: Option<f32>,
    pub gamma: Option<f64>,
    pub k: Option<usize>,
    pub tau: Option<f32>,
    pub lambda: Option<f32>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub augment: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFile {
    pub source: Option<String>,
    pub train: Option<Vec<PathBuf>>,
    pub test: Option<Vec<PathBuf>>,
    pub norm: Option<NormMode>,
    pub limit: Option<usize>,
    pub classes: Option<usize>,
    pub samples_per_class: Option<usize>,
    pub separation: Option<f32>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SfpFile {
    pub rate: Option<f64>,
    pub epochs: Option<usize>,
    pub cadence: Option<usize>,
}

/// Flag values; `None` leaves the file or default in place.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub profile: Option<Profile>,
    pub arch: Option<Arch>,
    pub gate: Option<GateKind>,
    pub out_dir: Option<PathBuf>,
    pub run_id: Option<String>,
    pub gamma: Option<f64>,
    pub k: Option<usize>,
    /// `(stage1, stage2 per iteration, stage3)`.
    pub epochs: Option<(usize, usize, usize)>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub sfp_rate: Option<f64>,
    pub sfp_epochs: Option<usize>,
    pub data_train: Vec<PathBuf>,
    pub data_test: Vec<PathBuf>,
    pub data_source: Option<String>,
    pub samples_per_class: Option<usize>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl RunConfig {
    /// Merges profile defaults, `file` and `flags`, in increasing precedence,
    /// then applies `ABP_SEED` (`env_seed`) over everything.
    pub fn resolve(file: ConfigFile, flags: &Overrides, env_seed: Option<&str>) -> Result<Self, CliError> {
        let profile = flags.profile.or(file.profile).unwrap_or_default();
        let arch = flags.arch.or(file.arch).unwrap_or(Arch::Micro);
        let mut train = match profile {
            Profile::Desk => TrainConfig::desk(),
            Profile::Paper => TrainConfig::paper(),
        };
        let mut data = DataConfig::for_profile(profile, arch);

        let t = file.train;
        set(&mut train.epochs.stage1, t.stage1_epochs);
        set(&mut train.epochs.stage2, t.stage2_epochs);
        set(&mut train.epochs.stage3, t.stage3_epochs);
        set(&mut train.lr.initial, t.lr);
        set(&mut train.lr.stage2_factor, t.stage2_lr_factor);
        set(&mut train.lr.stage3_factor, t.stage3_lr_factor);
        if t.stage2_decay_epoch.is_some() {
            train.lr.stage2_decay_epoch = t.stage2_decay_epoch;
        }
        set(&mut train.lr.stage2_decay_factor, t.stage2_decay_factor);
        set(&mut train.sgd.momentum, t.momentum);
        set(&mut train.sgd.weight_decay, t.weight_decay);
        set(&mut train.gamma, t.gamma);
        if t.k.is_some() {
            train.k = t.k;
        }
        set(&mut train.tau, t.tau);
        if t.lambda.is_some() {
            train.lambda = t.lambda;
        }
        set(&mut train.batch_size, t.batch_size);
        set(&mut train.seed, t.seed);
        set(&mut train.augment, t.augment);

        let d = file.data;
        set(&mut data.source, d.source);
        set(&mut data.train, d.train);
        set(&mut data.test, d.test);
        set(&mut data.norm, d.norm);
        if d.limit.is_some() {
            data.limit = d.limit;
        }
        set(&mut data.classes, d.classes);
        set(&mut data.samples_per_class, d.samples_per_class);
        set(&mut data.separation, d.separation);
        set(&mut data.seed, d.seed);

        let mut sfp = file.sfp.map(|s| SfpConfig {
            rate: s.rate.unwrap_or(SfpConfig::default().rate),
            epochs: s.epochs.unwrap_or(SfpConfig::default().epochs),
            cadence: s.cadence.unwrap_or(SfpConfig::default().cadence),
        });

        set(&mut train.gamma, flags.gamma);
        if flags.k.is_some() {
            train.k = flags.k;
        }
        if let Some((e1, e2, e3)) = flags.epochs {
            train.epochs.stage1 = e1;
            train.epochs.stage2 = e2;
            train.epochs.stage3 = e3;
        }
        set(&mut train.batch_size, flags.batch_size);
        set(&mut train.seed, flags.seed);
        if let Some(rate) = flags.sfp_rate {
            sfp.get_or_insert_with(SfpConfig::default).rate = rate;
        }
        if let Some(epochs) = flags.sfp_epochs {
            sfp.get_or_insert_with(SfpConfig::default).epochs = epochs;
        }
        if !flags.data_train.is_empty() {
            data.train = flags.data_train.clone();
        }
        if !flags.data_test.is_empty() {
            data.test = flags.data_test.clone();
        }
        set(&mut data.source, flags.data_source.clone());
        set(&mut data.samples_per_class, flags.samples_per_class);

        if let Some(raw) = env_seed {
            train.seed = raw
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
        }

        let cfg = Self {
            profile,
            arch,
            gate: flags.gate.or(file.gate).unwrap_or_default(),
            out_dir: flags
                .out_dir
                .clone()
                .or(file.out_dir)
                .unwrap_or_else(|| PathBuf::from("runs")),
            run_id: flags.run_id.clone().or(file.run_id),
            train,
            data,
            sfp,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if let Some(s) = &self.sfp {
            s.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        }
        match self.data.source.as_str() {
            "synthetic" => {
                if self.data.classes < 2 || self.data.samples_per_class == 0 {
                    return Err(CliError::Usage(
                        "synthetic data needs at least 2 classes and 1 sample per class".into(),
                    ));
                }
            }
            "cifar10" | "cifar100" => {
                if self.data.train.is_empty() {
                    return Err(CliError::Usage(format!(
                        "data source {} needs at least one training file",
                        self.data.source
                    )));
                }
            }
            other => {
                return Err(CliError::Usage(format!(
                    "unknown data source {other:?} (expected synthetic|cifar10|cifar100)"
                )))
            }
        }
        if let Some(id) = &self.run_id {
            if id.is_empty() || id.contains(['/', '\\']) {
                return Err(CliError::Usage(format!("run id {id:?} must be a plain name")));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let file = ConfigFile::parse("arch = \"rn20\"\n[train]\ngamma = 0.2\nbatch_size = 8\n").unwrap();
        let flags = Overrides {
            gamma: Some(0.6),
            ..Overrides::default()
        };
        let cfg = RunConfig::resolve(file, &flags, None).unwrap();
        assert_eq!(cfg.arch, Arch::Rn20);
        assert_eq!(cfg.train.gamma, 0.6);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.train.epochs, TrainConfig::desk().epochs);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["gama = 0.4\n", "[train]\nlearning_rate = 0.1\n", "[data]\npath = \"x\"\n"] {
            assert!(matches!(ConfigFile::parse(text), Err(CliError::Usage(_))), "{text}");
        }
    }

    #[test]
    fn environment_seed_wins() {
        let flags = Overrides {
            seed: Some(3),
            ..Overrides::default()
        };
        let cfg = RunConfig::resolve(ConfigFile::default(), &flags, Some("42")).unwrap();
        assert_eq!(cfg.train.seed, 42);
        assert!(RunConfig::resolve(ConfigFile::default(), &flags, Some("x")).is_err());
    }

    #[test]
    fn paper_profile_is_full_length() {
        let flags = Overrides {
            profile: Some(Profile::Paper),
            ..Overrides::default()
        };
        let cfg = RunConfig::resolve(ConfigFile::default(), &flags, None).unwrap();
        assert_eq!(cfg.train.epochs.stage2, 30);
        assert_eq!(cfg.train.lambda(), 9.0);
    }

    #[test]
    fn resolved_config_round_trips() {
        let flags = Overrides {
            sfp_rate: Some(0.5),
            ..Overrides::default()
        };
        let cfg = RunConfig::resolve(ConfigFile::default(), &flags, None).unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }
}
