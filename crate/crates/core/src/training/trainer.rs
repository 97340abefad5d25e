use std::time::Instant;

use diffcore::{Precision, Real, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::architectures::{Mechanism, MechanismNetwork};
use crate::data::{sample_profiles, streams, substream, SettingSource, SettingSpec};
use crate::error::{Error, Result};
use crate::losses::{
    budget_schedule_step, dual_update, lagrangian_multiplier_update, misreport_utilities, outer_loss_budget,
    outer_loss_lagrangian, truthful_utilities, DualState, LagrangianState, MetricsRecord,
};
use crate::training::{optimize_misreports, Adam, TrainingData};
use crate::validation::{evaluate_mechanism, EvalConfig};

/// Outer objective and its constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Objective {
    /// Revenue under the regret budget `ΣR / ΣP ≤ R_max`.
    Budget {
        r_max_start: f64,
        r_max_end: f64,
        gamma: f64,
        gamma_lr: f64,
        /// Outer iterations between budget schedule steps.
        schedule_interval: usize,
    },
    /// Revenue with per-bidder multipliers and a quadratic penalty.
    Lagrangian {
        lambda: f64,
        rho: f64,
        rho_lr: f64,
        update_period: usize,
    },
}

impl Objective {
    /// `γ = 1`, `γ_Δ = 0.5`, `R_max` from `0.01` down to `r_max_end`.
    pub fn budget(r_max_end: f64, schedule_interval: usize) -> Self {
        Objective::Budget { r_max_start: 0.01, r_max_end, gamma: 1.0, gamma_lr: 0.5, schedule_interval }
    }
}

/// Outer-loop settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub outer_iterations: usize,
    pub batch_size: usize,
    pub lr_outer: f64,
    pub lr_inner: f64,
    pub inner_steps_train: usize,
    pub inner_steps_valid: usize,
    /// Size of the fixed training set; `None` resamples every batch.
    pub dataset_size: Option<usize>,
    pub seed: u64,
    #[serde(with = "precision_name")]
    pub precision: Precision,
    pub objective: Objective,
    /// Outer iterations between validations (a final one always runs).
    pub validation_interval: usize,
    /// Held-out profiles per setting.
    pub validation_size: usize,
    /// Start each inner search from the batch's previous best misreports.
    pub warm_start: bool,
    pub workers: usize,
    /// Record elapsed time in validation rows; disable for byte-identical
    /// metric files.
    pub record_wall_time: bool,
    /// Consecutive non-finite gradient steps tolerated before giving up.
    pub max_skipped_steps: usize,
}

impl TrainConfig {
    /// Full-scale schedule: 200,000 iterations of batch 512.
    pub fn full_scale(seed: u64) -> Self {
        TrainConfig {
            outer_iterations: 200_000,
            batch_size: 512,
            lr_outer: 1e-3,
            lr_inner: 0.1,
            inner_steps_train: 50,
            inner_steps_valid: 1000,
            dataset_size: Some(640_000),
            seed,
            precision: Precision::F64,
            objective: Objective::budget(1e-3, 1250),
            validation_interval: 500,
            validation_size: 4096,
            warm_start: false,
            workers: 1,
            record_wall_time: true,
            max_skipped_steps: 100,
        }
    }

    /// Single-machine profile: batch 128, 5,000 iterations.
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            outer_iterations: 5000,
            batch_size: 128,
            dataset_size: Some(640_000),
            objective: Objective::budget(1e-3, 100),
            ..Self::full_scale(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("outer_iterations", self.outer_iterations),
            ("batch_size", self.batch_size),
            ("validation_interval", self.validation_interval),
            ("validation_size", self.validation_size),
            ("workers", self.workers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lr_outer > 0.0 && self.lr_inner > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.inner_steps_valid < self.inner_steps_train {
            return Err(Error::Config("validation must use at least as many inner steps as training".into()));
        }
        if self.dataset_size.is_some_and(|d| d < self.batch_size) {
            return Err(Error::Config("dataset is smaller than one batch".into()));
        }
        match self.objective {
            Objective::Budget { r_max_start, r_max_end, gamma, gamma_lr, schedule_interval } => {
                if !(r_max_end > 0.0 && r_max_start >= r_max_end && gamma >= 0.0 && gamma_lr > 0.0) {
                    return Err(Error::Config("budget needs 0 < r_max_end <= r_max_start, gamma >= 0, gamma_lr > 0".into()));
                }
                if schedule_interval == 0 {
                    return Err(Error::Config("schedule_interval must be positive".into()));
                }
            }
            Objective::Lagrangian { lambda, rho, update_period, .. } => {
                if !(lambda >= 0.0 && rho >= 0.0) || update_period == 0 {
                    return Err(Error::Config("lagrangian needs lambda, rho >= 0 and a positive update period".into()));
                }
            }
        }
        Ok(())
    }
}

/// Mutable multiplier state of the configured objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ObjectiveState {
    Budget(DualState),
    Lagrangian(LagrangianState),
}

impl ObjectiveState {
    pub fn initial(config: &TrainConfig, n: usize) -> Self {
        match config.objective {
            Objective::Budget { r_max_start, r_max_end, gamma, gamma_lr, schedule_interval } => {
                let steps = config.outer_iterations / schedule_interval;
                let mut state = DualState::new(r_max_start, r_max_end, steps.max(1));
                state.gamma = gamma;
                state.gamma_lr = gamma_lr;
                ObjectiveState::Budget(state)
            }
            Objective::Lagrangian { lambda, rho, rho_lr, update_period } => {
                ObjectiveState::Lagrangian(LagrangianState { lambdas: vec![lambda; n], rho, rho_lr, update_period })
            }
        }
    }

    /// `(γ, R_max)` in force, NaN for the Lagrangian objective.
    pub fn budget_terms(&self) -> (f64, f64) {
        match self {
            ObjectiveState::Budget(d) => (d.gamma, d.r_max),
            ObjectiveState::Lagrangian(_) => (f64::NAN, f64::NAN),
        }
    }
}

/// One row of the validation history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub iteration: usize,
    pub revenue: f64,
    pub regret_mean: f64,
    pub ratio: f64,
    pub gamma: f64,
    pub r_max: f64,
    pub wall_ms: u64,
}

/// Drives the outer optimization of one network.
pub struct Trainer<T: Real> {
    pub net: MechanismNetwork<T>,
    pub config: TrainConfig,
    pub data: TrainingData,
    pub state: ObjectiveState,
    pub optimizer: Adam<T>,
    /// Completed outer iterations.
    pub iteration: usize,
    pub history: Vec<ValidationRow>,
    pub train_log: Vec<MetricsRecord>,
    /// Wall time accumulated before this process (for resumed runs).
    pub elapsed_ms: u64,
    validation: Vec<(SettingSpec, Tensor<T>)>,
    warm: std::collections::HashMap<usize, Tensor<T>>,
    skipped: usize,
    started: Instant,
}

impl<T: Real> Trainer<T> {
    pub fn new(net: MechanismNetwork<T>, source: SettingSource, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if T::PRECISION != config.precision {
            return Err(Error::Config(format!(
                "configured precision {} does not match the network's {}",
                config.precision,
                T::PRECISION
            )));
        }
        for s in source.settings() {
            net.check_shape(s.n, s.m)?;
        }
        let n_max = source.max_shape().0;
        let state = ObjectiveState::initial(&config, n_max);
        let optimizer = Adam::new(config.lr_outer, net.params().tensors());
        Self::from_parts(net, source, config, state, optimizer, 0, Vec::new(), 0)
    }

    /// Reassembles a trainer from saved state.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        net: MechanismNetwork<T>,
        source: SettingSource,
        config: TrainConfig,
        state: ObjectiveState,
        optimizer: Adam<T>,
        iteration: usize,
        history: Vec<ValidationRow>,
        elapsed_ms: u64,
    ) -> Result<Self> {
        config.validate()?;
        let validation = source
            .settings()
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let mut rng = substream(config.seed, streams::VALID | k as u64);
                (s.clone(), sample_profiles(s, config.validation_size, &mut rng))
            })
            .collect();
        let data = TrainingData {
            source,
            batch_size: config.batch_size,
            seed: config.seed,
            dataset_size: config.dataset_size,
        };
        Ok(Trainer {
            net,
            config,
            data,
            state,
            optimizer,
            iteration,
            history,
            train_log: Vec::new(),
            elapsed_ms,
            validation,
            warm: Default::default(),
            skipped: 0,
            started: Instant::now(),
        })
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.outer_iterations
    }

    fn wall_ms(&self) -> u64 {
        if self.config.record_wall_time {
            self.elapsed_ms + self.started.elapsed().as_millis() as u64
        } else {
            0
        }
    }

    /// Elapsed wall time including earlier sessions.
    pub fn total_elapsed_ms(&self) -> u64 {
        self.elapsed_ms + self.started.elapsed().as_millis() as u64
    }

    /// One outer iteration: misreport search, outer loss, one Adam update of
    /// the parameters and one multiplier update.
    pub fn step(&mut self) -> Result<MetricsRecord> {
        let it = self.iteration;
        let batch = self.data.batch::<T>(it);
        let support = batch.setting.support();
        let key = self.data.batch_index(it);
        let init = if self.config.warm_start { self.warm.get(&key).cloned() } else { None };
        let mis = optimize_misreports(
            &self.net,
            &batch.profiles,
            &support,
            self.config.inner_steps_train,
            self.config.lr_inner,
            init.as_ref(),
        )?;
        if self.config.warm_start {
            self.warm.insert(key, mis.misreports.clone());
        }

        let mut tape = Tape::new();
        let params = self.net.bind(&mut tape, true);
        let (u_truth, pay) = truthful_utilities(&mut tape, &self.net, &params, &batch.profiles)?;
        let m_var = tape.constant(mis.misreports.clone());
        let u_mis = misreport_utilities(&mut tape, &self.net, &params, &batch.profiles, m_var)?;
        let gain = tape.sub(u_mis, u_truth)?;
        let gain = tape.clamp(gain, 0.0, f64::MAX)?;
        let p_mean = tape.mean(pay, 0, false)?;
        let r_mean = tape.mean(gain, 0, false)?;
        let (gamma, r_max) = self.state.budget_terms();
        let n = batch.setting.n;
        let loss = match &self.state {
            ObjectiveState::Budget(d) => outer_loss_budget(&mut tape, p_mean, r_mean, d.gamma)?,
            ObjectiveState::Lagrangian(l) => {
                let mut sub = l.clone();
                sub.lambdas.truncate(n);
                outer_loss_lagrangian(&mut tape, p_mean, r_mean, &sub)?
            }
        };
        let payments: Vec<f64> = tape.value(p_mean).data().iter().map(|x| x.f64()).collect();
        let regrets: Vec<f64> = tape.value(r_mean).data().iter().map(|x| x.f64()).collect();
        let metrics = MetricsRecord::new(payments, regrets, r_max, gamma);

        let grads = tape.backward(loss)?;
        let g: Vec<&Tensor<T>> = params.vars().iter().map(|&v| grads.wrt(v)).collect();
        if g.iter().all(|t| t.is_finite()) && metrics.revenue.is_finite() {
            self.skipped = 0;
            self.optimizer.update(self.net.params_mut().tensors_mut(), &g);
            if !self.net.params().is_finite() {
                return Err(Error::Numeric { iteration: it, reason: "parameters became non-finite".into() });
            }
        } else {
            self.skipped += 1;
            log::warn!("iteration {it}: non-finite gradient, step skipped ({} in a row)", self.skipped);
            if self.skipped > self.config.max_skipped_steps {
                return Err(Error::Numeric { iteration: it, reason: "too many consecutive non-finite gradients".into() });
            }
        }

        match &mut self.state {
            ObjectiveState::Budget(d) => {
                *d = dual_update(d, metrics.sum_regret(), metrics.revenue);
                if let Objective::Budget { schedule_interval, .. } = self.config.objective {
                    if (it + 1) % schedule_interval == 0 {
                        *d = budget_schedule_step(d);
                    }
                }
            }
            ObjectiveState::Lagrangian(l) => {
                if (it + 1) % l.update_period == 0 {
                    let mut regrets = metrics.regrets.clone();
                    regrets.resize(l.lambdas.len(), 0.0);
                    *l = lagrangian_multiplier_update(l, &regrets);
                }
            }
        }
        self.iteration += 1;
        self.train_log.push(metrics.clone());
        Ok(metrics)
    }

    /// Validation with the full inner search on the held-out profiles,
    /// averaged over the source's settings; appends a history row.
    pub fn validate(&mut self) -> Result<ValidationRow> {
        let (gamma, r_max) = self.state.budget_terms();
        let eval = EvalConfig {
            inner_steps: self.config.inner_steps_valid,
            inner_lr: self.config.lr_inner,
            chunk: 512,
            workers: self.config.workers,
        };
        let (mut revenue, mut regret, mut sum_r) = (0.0, 0.0, 0.0);
        for (setting, profiles) in &self.validation {
            let rep = evaluate_mechanism(&self.net, setting, profiles, &eval, None)?;
            revenue += rep.revenue;
            regret += rep.regret_mean;
            sum_r += rep.sum_regret();
        }
        let k = self.validation.len() as f64;
        let (revenue, regret, sum_r) = (revenue / k, regret / k, sum_r / k);
        let ratio = crate::losses::budget_ratio_of(sum_r, revenue, r_max);
        let row = ValidationRow { iteration: self.iteration, revenue, regret_mean: regret, ratio, gamma, r_max, wall_ms: self.wall_ms() };
        log::info!(
            "iteration {}: revenue {:.4} regret {:.2e} ratio {:.3} gamma {:.3}",
            row.iteration,
            row.revenue,
            row.regret_mean,
            row.ratio,
            row.gamma
        );
        self.history.push(row.clone());
        Ok(row)
    }

    /// Whether a validation is due after the current iteration.
    pub fn validation_due(&self) -> bool {
        self.iteration > 0
            && (self.iteration % self.config.validation_interval == 0 || self.iteration == self.config.outer_iterations)
            && self.history.last().map_or(true, |r| r.iteration != self.iteration)
    }

    /// Runs to completion, validating on schedule.
    pub fn run(&mut self) -> Result<()> {
        self.run_with(|_| Ok(()))
    }

    /// Like [`Trainer::run`], calling `after_step` after every iteration (and
    /// its validation, when one was due).
    pub fn run_with(&mut self, mut after_step: impl FnMut(&Self) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            self.step()?;
            if self.validation_due() {
                self.validate()?;
            }
            after_step(self)?;
        }
        Ok(())
    }

    /// `(Σ R / Σ P) / R_max` accumulated over the last `window` training
    /// batches of this session.
    pub fn recent_training_ratio(&self, window: usize) -> f64 {
        let tail = &self.train_log[self.train_log.len().saturating_sub(window)..];
        let sum_r: f64 = tail.iter().map(MetricsRecord::sum_regret).sum();
        let sum_p: f64 = tail.iter().map(|m| m.revenue).sum();
        let r_max = tail.last().map_or(f64::NAN, |m| m.r_max);
        crate::losses::budget_ratio_of(sum_r, sum_p, r_max)
    }
}

/// Trains a network of `arch` on `source` and returns it with its history.
pub fn train<T: Real>(
    config: TrainConfig,
    source: SettingSource,
    arch: crate::architectures::ArchConfig,
) -> Result<(MechanismNetwork<T>, Vec<ValidationRow>)> {
    let net = MechanismNetwork::new(arch, config.seed)?;
    let mut trainer = Trainer::new(net, source, config)?;
    trainer.run()?;
    Ok((trainer.net, trainer.history))
}

/// Serializes [`Precision`] as `"f32"` / `"f64"`.
mod precision_name {
    use diffcore::Precision;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(p: &Precision, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&p.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Precision, D::Error> {
        let name = String::deserialize(d)?;
        name.parse().map_err(serde::de::Error::custom)
    }
}
