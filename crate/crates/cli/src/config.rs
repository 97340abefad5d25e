//! Run configuration files.
//!
//! A run is described by a TOML file with five sections:
//!
//! ```toml
//! [run]
//! seed = 0
//! output_dir = "runs/1x2"
//! precision = "f64"        # or "f32"
//! profile = "desk"         # or "full"
//!
//! [setting]
//! preset = "1x2"           # NxM, asym1x2, multi, multi-train, multi-test
//!
//! [architecture]
//! kind = "regretformer"    # regretnet, equivariantnet, regretformer
//! hidden = 32              # optional overrides of the preset
//!
//! [training]
//! outer_iterations = 5000  # optional overrides of the profile
//!
//! [objective]
//! kind = "budget"
//! r_max_end = 1e-3
//! ```
//!
//! Every key not given falls back to the reference hyperparameters of the
//! profile. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use diffcore::Precision;
use mechnet::architectures::{ArchConfig, ArchKind, PeMode};
use mechnet::data::SettingSource;
use mechnet::training::{Objective, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Hyperparameter profile a run starts from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Batch 128, 5,000 iterations, halved hidden dimensions.
    #[default]
    Desk,
    /// Batch 512, 200,000 iterations, full hidden dimensions.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_precision")]
    pub precision: String,
    #[serde(default)]
    pub profile: Profile,
    /// Record elapsed milliseconds in the metrics; `false` writes zeros so
    /// that repeated runs produce identical files.
    #[serde(default = "default_true")]
    pub record_wall_time: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            output_dir: default_output_dir(),
            workers: default_workers(),
            precision: default_precision(),
            profile: Profile::Desk,
            record_wall_time: true,
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_workers() -> usize {
    1
}

fn default_precision() -> String {
    "f64".into()
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettingSection {
    pub preset: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSection {
    pub kind: ArchKind,
    pub layers: Option<usize>,
    pub hidden: Option<usize>,
    pub blocks: Option<usize>,
    pub heads: Option<usize>,
    pub use_pe: Option<bool>,
    pub pe_mode: Option<PeMode>,
    pub separate_stacks: Option<bool>,
    pub padding: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub outer_iterations: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr_outer: Option<f64>,
    pub lr_inner: Option<f64>,
    pub inner_steps_train: Option<usize>,
    pub inner_steps_valid: Option<usize>,
    /// Fixed training-set size; `0` draws fresh profiles for every batch.
    pub dataset_size: Option<usize>,
    pub validation_interval: Option<usize>,
    pub validation_size: Option<usize>,
    pub warm_start: Option<bool>,
    pub max_skipped_steps: Option<usize>,
    /// Iterations between checkpoint writes; the final state is always saved.
    pub checkpoint_interval: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    #[default]
    Budget,
    Lagrangian,
}

/// Objective constants; only the keys of the chosen kind may be present.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSection {
    pub kind: Option<ObjectiveKind>,
    pub r_max_end: Option<f64>,
    pub r_max_start: Option<f64>,
    pub gamma: Option<f64>,
    pub gamma_lr: Option<f64>,
    pub schedule_interval: Option<usize>,
    pub lambda: Option<f64>,
    pub rho: Option<f64>,
    pub rho_lr: Option<f64>,
    pub update_period: Option<usize>,
}

impl ObjectiveSection {
    fn budget_keys(&self) -> Vec<&'static str> {
        let present = [
            ("r_max_end", self.r_max_end.is_some()),
            ("r_max_start", self.r_max_start.is_some()),
            ("gamma", self.gamma.is_some()),
            ("gamma_lr", self.gamma_lr.is_some()),
            ("schedule_interval", self.schedule_interval.is_some()),
        ];
        present.iter().filter(|p| p.1).map(|p| p.0).collect()
    }

    fn lagrangian_keys(&self) -> Vec<&'static str> {
        let present = [
            ("lambda", self.lambda.is_some()),
            ("rho", self.rho.is_some()),
            ("rho_lr", self.rho_lr.is_some()),
            ("update_period", self.update_period.is_some()),
        ];
        present.iter().filter(|p| p.1).map(|p| p.0).collect()
    }

    /// Builds the objective over the profile default `base`.
    pub fn resolve(&self, base: &Objective) -> Result<Objective, CliError> {
        let budget = self.budget_keys();
        let lagrangian = self.lagrangian_keys();
        let kind = match self.kind {
            Some(k) => k,
            None if !lagrangian.is_empty() && budget.is_empty() => ObjectiveKind::Lagrangian,
            None => ObjectiveKind::Budget,
        };
        match kind {
            ObjectiveKind::Budget => {
                if !lagrangian.is_empty() {
                    return Err(CliError::Config(format!(
                        "budget objective conflicts with lagrangian keys: {}",
                        lagrangian.join(", ")
                    )));
                }
                let Objective::Budget { r_max_start, r_max_end, gamma, gamma_lr, schedule_interval } = *base else {
                    unreachable!("profiles default to the budget objective")
                };
                Ok(Objective::Budget {
                    r_max_start: self.r_max_start.unwrap_or(r_max_start),
                    r_max_end: self.r_max_end.unwrap_or(r_max_end),
                    gamma: self.gamma.unwrap_or(gamma),
                    gamma_lr: self.gamma_lr.unwrap_or(gamma_lr),
                    schedule_interval: self.schedule_interval.unwrap_or(schedule_interval),
                })
            }
            ObjectiveKind::Lagrangian => {
                if !budget.is_empty() {
                    return Err(CliError::Config(format!(
                        "lagrangian objective conflicts with budget keys: {}",
                        budget.join(", ")
                    )));
                }
                // These have no sensible defaults; all must be chosen.
                match (self.lambda, self.rho, self.rho_lr, self.update_period) {
                    (Some(lambda), Some(rho), Some(rho_lr), Some(update_period)) => {
                        Ok(Objective::Lagrangian { lambda, rho, rho_lr, update_period })
                    }
                    _ => Err(CliError::Config(
                        "lagrangian objective needs lambda, rho, rho_lr and update_period".into(),
                    )),
                }
            }
        }
    }
}

/// Contents of a run configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub run: RunSection,
    pub setting: SettingSection,
    pub architecture: ArchitectureSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub objective: ObjectiveSection,
}

/// A configuration with every default filled in.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedRun {
    pub source: SettingSource,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    pub checkpoint_interval: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configurations serialize")
    }

    pub fn resolve(&self) -> Result<ResolvedRun, CliError> {
        let precision: Precision = self.run.precision.parse().map_err(|e| CliError::Config(format!("{e}")))?;
        let source = SettingSource::preset(&self.setting.preset)?;
        let (n, m) = source.max_shape();
        let desk = self.run.profile == Profile::Desk;

        let a = &self.architecture;
        let mut arch = ArchConfig::preset(a.kind, &self.setting.preset, n, m, desk);
        arch.layers = a.layers.unwrap_or(arch.layers);
        arch.hidden = a.hidden.unwrap_or(arch.hidden);
        arch.blocks = a.blocks.unwrap_or(arch.blocks);
        arch.heads = a.heads.unwrap_or(arch.heads);
        arch.use_pe = a.use_pe.unwrap_or(arch.use_pe);
        arch.pe_mode = a.pe_mode.unwrap_or(arch.pe_mode);
        arch.separate_stacks = a.separate_stacks.unwrap_or(arch.separate_stacks);
        arch.padding = a.padding.unwrap_or(arch.padding);
        arch.validate()?;

        let seed = self.run.seed;
        let mut train = if desk { TrainConfig::desk(seed) } else { TrainConfig::full_scale(seed) };
        let t = &self.training;
        train.outer_iterations = t.outer_iterations.unwrap_or(train.outer_iterations);
        train.batch_size = t.batch_size.unwrap_or(train.batch_size);
        train.lr_outer = t.lr_outer.unwrap_or(train.lr_outer);
        train.lr_inner = t.lr_inner.unwrap_or(train.lr_inner);
        train.inner_steps_train = t.inner_steps_train.unwrap_or(train.inner_steps_train);
        train.inner_steps_valid = t.inner_steps_valid.unwrap_or(train.inner_steps_valid);
        if let Some(size) = t.dataset_size {
            train.dataset_size = (size > 0).then_some(size);
        }
        train.validation_interval = t.validation_interval.unwrap_or(train.validation_interval);
        train.validation_size = t.validation_size.unwrap_or(train.validation_size);
        train.warm_start = t.warm_start.unwrap_or(train.warm_start);
        train.max_skipped_steps = t.max_skipped_steps.unwrap_or(train.max_skipped_steps);
        train.precision = precision;
        train.workers = self.run.workers;
        train.record_wall_time = self.run.record_wall_time;
        train.objective = self.objective.resolve(&train.objective)?;
        train.validate()?;
        if t.checkpoint_interval == Some(0) {
            return Err(CliError::Config("checkpoint_interval must be positive".into()));
        }

        Ok(ResolvedRun {
            source,
            arch,
            train,
            output_dir: self.run.output_dir.clone(),
            checkpoint_interval: t.checkpoint_interval,
        })
    }
}
