//! Command-line parsing and the subcommand pipelines.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use diffcore::{Precision, Real};
use mechnet::architectures::{ArchConfig, ArchKind, MechanismNetwork};
use mechnet::auction::{monte_carlo_revenue, BaselineKind, BaselineMechanism};
use mechnet::data::{sample_profiles, streams, substream, SettingSource, SettingSpec};
use mechnet::training::Trainer;
use mechnet::validation::{cross_misreport_regret, distill, evaluate_mechanism, DistillConfig, EvalConfig};
use serde::Serialize;
use serde_json::json;

use crate::checkpoint::{self, AnyCheckpoint, Checkpoint};
use crate::config::{ObjectiveKind, Profile, RunConfig};
use crate::heatmap::{allocation_heatmap, known_boundary, write_overlay};
use crate::metrics::write_metrics;
use crate::CliError;

/// Overrides the configured output directory.
pub const ENV_OUTPUT_DIR: &str = "MECHNET_OUTPUT_DIR";
/// Default worker count.
pub const ENV_THREADS: &str = "MECHNET_THREADS";

const CHECKPOINT_FILE: &str = "checkpoint.bin";
const METRICS_FILE: &str = "metrics.csv";
const CONFIG_FILE: &str = "run.toml";

#[derive(Debug, Parser)]
#[command(name = "mechnet", version, about = "Train and evaluate neural auction mechanisms")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a network from a run configuration, or resume a checkpoint.
    Train(TrainArgs),
    /// Revenue and regret of a checkpoint on fresh profiles.
    Evaluate(EvaluateArgs),
    /// Regret of one network at misreports optimized against another.
    CrossMisreport(CrossArgs),
    /// Fit a student network to a teacher's outcomes.
    Distill(DistillArgs),
    /// Monte-Carlo revenue of an analytic mechanism.
    Baseline(BaselineArgs),
    /// Allocation probabilities of a one-bidder, two-item network on a mesh.
    Heatmap(HeatmapArgs),
}

const LAGRANGIAN_FLAGS: [&str; 4] = ["lambda", "rho", "rho_lr", "update_period"];

#[derive(Debug, Args)]
struct TrainArgs {
    /// Run configuration (TOML).
    #[arg(long, required_unless_present = "resume", conflicts_with = "resume")]
    config: Option<PathBuf>,
    /// Continue from a training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long, conflicts_with = "resume")]
    seed: Option<u64>,
    /// Total outer iterations of the run.
    #[arg(long)]
    iterations: Option<usize>,
    /// Stop and checkpoint once this many iterations are complete.
    #[arg(long)]
    stop_after: Option<usize>,
    #[arg(long)]
    checkpoint_interval: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_enum, conflicts_with = "resume")]
    objective: Option<ObjectiveKind>,
    #[arg(long, conflicts_with_all = LAGRANGIAN_FLAGS, conflicts_with = "resume")]
    r_max_end: Option<f64>,
    #[arg(long, conflicts_with_all = LAGRANGIAN_FLAGS, conflicts_with = "resume")]
    r_max_start: Option<f64>,
    #[arg(long, conflicts_with_all = LAGRANGIAN_FLAGS, conflicts_with = "resume")]
    gamma: Option<f64>,
    #[arg(long, conflicts_with_all = LAGRANGIAN_FLAGS, conflicts_with = "resume")]
    gamma_lr: Option<f64>,
    #[arg(long, conflicts_with = "resume")]
    lambda: Option<f64>,
    #[arg(long, conflicts_with = "resume")]
    rho: Option<f64>,
    #[arg(long, conflicts_with = "resume")]
    rho_lr: Option<f64>,
    #[arg(long, conflicts_with = "resume")]
    update_period: Option<usize>,
}

/// Inner-search options shared by the scoring commands.
#[derive(Debug, Args)]
struct SearchArgs {
    /// Profiles per setting.
    #[arg(long, default_value_t = 4096)]
    samples: usize,
    #[arg(long, default_value_t = 1000)]
    inner_steps: usize,
    #[arg(long, default_value_t = 0.1)]
    inner_lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Setting preset; defaults to the one the network was trained on.
    #[arg(long)]
    setting: Option<String>,
    /// Budget to report the regret ratio against.
    #[arg(long)]
    r_max: Option<f64>,
    #[command(flatten)]
    search: SearchArgs,
}

#[derive(Debug, Args)]
struct CrossArgs {
    /// Network whose regret is measured.
    #[arg(long)]
    target: PathBuf,
    /// Network the misreports are optimized against.
    #[arg(long)]
    prober: PathBuf,
    #[arg(long)]
    setting: Option<String>,
    #[command(flatten)]
    search: SearchArgs,
}

#[derive(Debug, Args)]
struct DistillArgs {
    #[arg(long)]
    teacher: PathBuf,
    /// Student checkpoint, or an architecture name for a fresh student.
    #[arg(long)]
    student: String,
    #[arg(long)]
    setting: Option<String>,
    /// Hyperparameter profile of a fresh student.
    #[arg(long, value_enum, default_value = "desk")]
    profile: Profile,
    #[arg(long, default_value_t = 2000)]
    iterations: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 25)]
    inner_steps: usize,
    #[arg(long, default_value_t = 1024)]
    eval_samples: usize,
    #[arg(long, default_value_t = 1000)]
    eval_inner_steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where the student checkpoint is written.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BaselineArgs {
    /// vcg, myerson-itemwise or myerson-bundled.
    #[arg(long)]
    mechanism: String,
    #[arg(long)]
    setting: String,
    #[arg(long, default_value_t = 1_000_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct HeatmapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    setting: Option<String>,
    /// Mesh points per axis.
    #[arg(long, default_value_t = 101)]
    resolution: usize,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Also render SVG images.
    #[arg(long)]
    svg: bool,
    /// Distance from the known region boundaries excluded from the interior
    /// deviation statistic.
    #[arg(long, default_value_t = 0.05)]
    band: f64,
}

/// Runs the command line `argv` (program name first) with the process's
/// standard streams and returns the exit status.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let (mut out, mut err) = (std::io::stdout().lock(), std::io::stderr().lock());
    run_with_output(argv, &mut out, &mut err)
}

/// Like [`run`], writing results to `out` and diagnostics to `err`.
pub fn run_with_output<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let sink: &mut dyn Write = if code == 0 { out } else { err };
            let _ = write!(sink, "{}", e.render());
            return code;
        }
    };
    let level = if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    log::set_max_level(level);

    let result = match cli.command {
        Command::Train(a) => train(a, out),
        Command::Evaluate(a) => evaluate(a, out),
        Command::CrossMisreport(a) => cross(a, out),
        Command::Distill(a) => distill_cmd(a, out),
        Command::Baseline(a) => baseline(a, out),
        Command::Heatmap(a) => heatmap(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{}", e.one_line());
            e.exit_code()
        }
    }
}

fn emit(out: &mut dyn Write, value: &impl Serialize) -> Result<(), CliError> {
    let line = serde_json::to_string(value).map_err(|e| CliError::Format(e.to_string()))?;
    writeln!(out, "{line}").map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

fn env_output_dir() -> Option<PathBuf> {
    std::env::var_os(ENV_OUTPUT_DIR).filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn workers(flag: Option<usize>) -> Result<usize, CliError> {
    if let Some(w) = flag {
        return Ok(w);
    }
    match std::env::var(ENV_THREADS) {
        Ok(v) if !v.is_empty() => {
            v.parse().map_err(|_| CliError::Config(format!("{ENV_THREADS} must be a positive integer, got `{v}`")))
        }
        _ => Ok(1),
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent().filter(|d| !d.as_os_str().is_empty()).map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Applies objective flags over the file's `[objective]` section. Flags of
/// one kind replace any keys of the other kind found in the file.
fn apply_objective_flags(cfg: &mut RunConfig, a: &TrainArgs) -> Result<(), CliError> {
    let budget = a.r_max_end.is_some() || a.r_max_start.is_some() || a.gamma.is_some() || a.gamma_lr.is_some();
    let lagrangian = a.lambda.is_some() || a.rho.is_some() || a.rho_lr.is_some() || a.update_period.is_some();
    let kind = match (a.objective, budget, lagrangian) {
        (Some(ObjectiveKind::Budget), _, true) | (Some(ObjectiveKind::Lagrangian), true, _) => {
            return Err(CliError::Usage("objective flags conflict with --objective".into()));
        }
        (Some(k), _, _) => Some(k),
        (None, true, _) => Some(ObjectiveKind::Budget),
        (None, _, true) => Some(ObjectiveKind::Lagrangian),
        (None, false, false) => None,
    };
    let o = &mut cfg.objective;
    match kind {
        Some(ObjectiveKind::Budget) => {
            o.kind = Some(ObjectiveKind::Budget);
            (o.lambda, o.rho, o.rho_lr, o.update_period) = (None, None, None, None);
        }
        Some(ObjectiveKind::Lagrangian) => {
            o.kind = Some(ObjectiveKind::Lagrangian);
            (o.r_max_end, o.r_max_start, o.gamma, o.gamma_lr, o.schedule_interval) = (None, None, None, None, None);
        }
        None => {}
    }
    o.r_max_end = a.r_max_end.or(o.r_max_end);
    o.r_max_start = a.r_max_start.or(o.r_max_start);
    o.gamma = a.gamma.or(o.gamma);
    o.gamma_lr = a.gamma_lr.or(o.gamma_lr);
    o.lambda = a.lambda.or(o.lambda);
    o.rho = a.rho.or(o.rho);
    o.rho_lr = a.rho_lr.or(o.rho_lr);
    o.update_period = a.update_period.or(o.update_period);
    Ok(())
}

struct Drive {
    output_dir: PathBuf,
    stop_after: Option<usize>,
    checkpoint_interval: Option<usize>,
}

#[derive(Serialize)]
struct TrainSummary {
    iteration: usize,
    finished: bool,
    revenue: Option<f64>,
    regret_mean: Option<f64>,
    ratio: Option<f64>,
    gamma: Option<f64>,
    checkpoint: PathBuf,
    metrics: PathBuf,
}

/// Runs `trainer` until it finishes or reaches the stop point, keeping the
/// metrics file and checkpoint in `output_dir` up to date.
fn drive<T: Real>(mut trainer: Trainer<T>, opts: &Drive, out: &mut dyn Write) -> Result<(), CliError> {
    create_dir(&opts.output_dir)?;
    let ckpt_path = opts.output_dir.join(CHECKPOINT_FILE);
    let metrics_path = opts.output_dir.join(METRICS_FILE);
    let stop = opts.stop_after.unwrap_or(usize::MAX).min(trainer.config.outer_iterations);
    while trainer.iteration < stop {
        trainer.step()?;
        if trainer.validation_due() {
            trainer.validate()?;
            write_metrics(&metrics_path, &trainer.history)?;
        }
        if opts.checkpoint_interval.is_some_and(|k| trainer.iteration % k == 0) {
            Checkpoint::from_trainer(&trainer).save(&ckpt_path)?;
            log::info!("checkpoint at iteration {}", trainer.iteration);
        }
    }
    write_metrics(&metrics_path, &trainer.history)?;
    Checkpoint::from_trainer(&trainer).save(&ckpt_path)?;
    let last = trainer.history.last();
    let finite = |x: f64| x.is_finite().then_some(x);
    emit(
        out,
        &TrainSummary {
            iteration: trainer.iteration,
            finished: trainer.is_done(),
            revenue: last.and_then(|r| finite(r.revenue)),
            regret_mean: last.and_then(|r| finite(r.regret_mean)),
            ratio: last.and_then(|r| finite(r.ratio)),
            gamma: last.and_then(|r| finite(r.gamma)),
            checkpoint: ckpt_path,
            metrics: metrics_path,
        },
    )
}

fn fresh_trainer<T: Real>(run: &crate::config::ResolvedRun) -> Result<Trainer<T>, CliError> {
    let net = MechanismNetwork::new(run.arch.clone(), run.train.seed)?;
    Ok(Trainer::new(net, run.source.clone(), run.train.clone())?)
}

fn train(a: TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if let Some(path) = &a.resume {
        let ck = checkpoint::load(path)?;
        let opts = Drive {
            output_dir: a.output_dir.clone().or_else(env_output_dir).unwrap_or_else(|| parent_dir(path)),
            stop_after: a.stop_after,
            checkpoint_interval: a.checkpoint_interval,
        };
        let adjust = |config: &mut mechnet::training::TrainConfig| -> Result<(), CliError> {
            if let Some(n) = a.iterations {
                config.outer_iterations = n;
            }
            if let Some(w) = a.workers {
                config.workers = w;
            }
            Ok(config.validate()?)
        };
        return match ck {
            AnyCheckpoint::F32(c) => {
                let mut t = c.into_trainer()?;
                adjust(&mut t.config)?;
                drive(t, &opts, out)
            }
            AnyCheckpoint::F64(c) => {
                let mut t = c.into_trainer()?;
                adjust(&mut t.config)?;
                drive(t, &opts, out)
            }
        };
    }

    let path = a.config.as_ref().expect("clap requires --config without --resume");
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = a.seed {
        cfg.run.seed = seed;
    }
    if let Some(n) = a.iterations {
        cfg.training.outer_iterations = Some(n);
    }
    if a.checkpoint_interval.is_some() {
        cfg.training.checkpoint_interval = a.checkpoint_interval;
    }
    if a.workers.is_some() || std::env::var_os(ENV_THREADS).is_some() {
        cfg.run.workers = workers(a.workers)?;
    }
    apply_objective_flags(&mut cfg, &a)?;
    if let Some(dir) = a.output_dir.clone().or_else(env_output_dir) {
        cfg.run.output_dir = dir;
    }
    let resolved = cfg.resolve()?;
    create_dir(&resolved.output_dir)?;
    let saved = resolved.output_dir.join(CONFIG_FILE);
    std::fs::write(&saved, cfg.to_toml()).map_err(|e| CliError::io(&saved, e))?;
    let opts = Drive {
        output_dir: resolved.output_dir.clone(),
        stop_after: a.stop_after,
        checkpoint_interval: resolved.checkpoint_interval,
    };
    match resolved.train.precision {
        Precision::F32 => drive(fresh_trainer::<f32>(&resolved)?, &opts, out),
        Precision::F64 => drive(fresh_trainer::<f64>(&resolved)?, &opts, out),
    }
}

/// Settings to score on: the flag's preset, else the checkpoint's own.
fn scoring_settings(flag: Option<&str>, own: &SettingSource) -> Result<Vec<SettingSpec>, CliError> {
    let source = match flag {
        Some(name) => SettingSource::preset(name)?,
        None => own.clone(),
    };
    Ok(source.settings().to_vec())
}

fn eval_config(s: &SearchArgs) -> Result<EvalConfig, CliError> {
    Ok(EvalConfig { inner_steps: s.inner_steps, inner_lr: s.inner_lr, chunk: 512, workers: workers(s.workers)? })
}

fn evaluation_profiles<T: Real>(setting: &SettingSpec, k: usize, s: &SearchArgs) -> diffcore::Tensor<T> {
    sample_profiles(setting, s.samples, &mut substream(s.seed, streams::EVAL | k as u64))
}

fn evaluate(a: EvaluateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let ck = checkpoint::load(&a.checkpoint)?;
    let settings = scoring_settings(a.setting.as_deref(), ck.source())?;
    let eval = eval_config(&a.search)?;
    fn score<T: Real>(
        c: &Checkpoint<T>,
        settings: &[SettingSpec],
        a: &EvaluateArgs,
        eval: &EvalConfig,
        out: &mut dyn Write,
    ) -> Result<(), CliError> {
        for (k, setting) in settings.iter().enumerate() {
            let profiles = evaluation_profiles::<T>(setting, k, &a.search);
            let report = evaluate_mechanism(&c.net, setting, &profiles, eval, a.r_max)?;
            emit(out, &json!({ "network": c.net.kind().name(), "report": report }))?;
        }
        Ok(())
    }
    match &ck {
        AnyCheckpoint::F32(c) => score(c, &settings, &a, &eval, out),
        AnyCheckpoint::F64(c) => score(c, &settings, &a, &eval, out),
    }
}

fn precision_mismatch(a: &AnyCheckpoint, b: &AnyCheckpoint) -> CliError {
    CliError::Config(format!("checkpoints differ in precision ({} vs {})", a.precision(), b.precision()))
}

fn cross(a: CrossArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let target = checkpoint::load(&a.target)?;
    let prober = checkpoint::load(&a.prober)?;
    let settings = scoring_settings(a.setting.as_deref(), target.source())?;
    let eval = eval_config(&a.search)?;
    fn score<T: Real>(
        target: &Checkpoint<T>,
        prober: &Checkpoint<T>,
        settings: &[SettingSpec],
        s: &SearchArgs,
        eval: &EvalConfig,
        out: &mut dyn Write,
    ) -> Result<(), CliError> {
        for (k, setting) in settings.iter().enumerate() {
            let profiles = evaluation_profiles::<T>(setting, k, s);
            let report = cross_misreport_regret(&target.net, &prober.net, setting, &profiles, eval)?;
            emit(
                out,
                &json!({
                    "target": target.net.kind().name(),
                    "prober": prober.net.kind().name(),
                    "report": report,
                }),
            )?;
        }
        Ok(())
    }
    match (&target, &prober) {
        (AnyCheckpoint::F32(t), AnyCheckpoint::F32(p)) => score(t, p, &settings, &a.search, &eval, out),
        (AnyCheckpoint::F64(t), AnyCheckpoint::F64(p)) => score(t, p, &settings, &a.search, &eval, out),
        _ => Err(precision_mismatch(&target, &prober)),
    }
}

fn distill_cmd(a: DistillArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let teacher = checkpoint::load(&a.teacher)?;
    let source = match &a.setting {
        Some(name) => SettingSource::preset(name)?,
        None => teacher.source().clone(),
    };
    let student_path = Path::new(&a.student);
    let student = if student_path.is_file() {
        checkpoint::load(student_path)?
    } else {
        let kind: ArchKind = a.student.parse().map_err(|e: mechnet::Error| {
            CliError::Usage(format!("--student is neither a checkpoint nor an architecture: {e}"))
        })?;
        let (n, m) = source.max_shape();
        let desk = a.profile == Profile::Desk;
        let arch = ArchConfig::preset(kind, source.label(), n, m, desk);
        match teacher.precision() {
            Precision::F32 => AnyCheckpoint::F32(Checkpoint {
                net: MechanismNetwork::new(arch, a.seed)?,
                source: source.clone(),
                training: None,
            }),
            Precision::F64 => AnyCheckpoint::F64(Checkpoint {
                net: MechanismNetwork::new(arch, a.seed)?,
                source: source.clone(),
                training: None,
            }),
        }
    };
    let output = a.output.clone().unwrap_or_else(|| {
        env_output_dir().unwrap_or_else(|| parent_dir(&a.teacher)).join("student.bin")
    });
    let cfg = DistillConfig {
        iterations: a.iterations,
        batch_size: a.batch_size,
        lr: a.lr,
        inner_steps: a.inner_steps,
        seed: a.seed,
        eval_samples: a.eval_samples,
        eval: EvalConfig { inner_steps: a.eval_inner_steps, ..EvalConfig::default() },
        ..DistillConfig::default()
    };
    fn fit<T: Real>(
        teacher: &Checkpoint<T>,
        student: Checkpoint<T>,
        source: &SettingSource,
        cfg: &DistillConfig,
        output: &Path,
        out: &mut dyn Write,
    ) -> Result<(), CliError> {
        let (net, report) = distill(&teacher.net, student.net, source, cfg)?;
        Checkpoint { net, source: source.clone(), training: None }.save(output)?;
        emit(out, &json!({ "student_checkpoint": output, "report": report }))
    }
    match (&teacher, student) {
        (AnyCheckpoint::F32(t), AnyCheckpoint::F32(s)) => fit(t, s, &source, &cfg, &output, out),
        (AnyCheckpoint::F64(t), AnyCheckpoint::F64(s)) => fit(t, s, &source, &cfg, &output, out),
        (_, s) => Err(precision_mismatch(&teacher, &s)),
    }
}

fn baseline(a: BaselineArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let kind: BaselineKind = a.mechanism.parse().map_err(|e: mechnet::Error| CliError::Usage(e.to_string()))?;
    let setting: SettingSpec = a.setting.parse()?;
    let mech = BaselineMechanism::new(kind, setting.clone())?;
    let est = monte_carlo_revenue(&mech, a.samples, a.seed)?;
    emit(
        out,
        &json!({
            "mechanism": kind.to_string(),
            "setting": setting.label,
            "revenue": est.mean,
            "std_err": est.std_err,
            "samples": est.samples,
        }),
    )
}

fn heatmap(a: HeatmapArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let ck = checkpoint::load(&a.checkpoint)?;
    let setting = match &a.setting {
        Some(name) => name.parse::<SettingSpec>()?,
        None => match ck.source() {
            SettingSource::Single(s) => s.clone(),
            SettingSource::Multi(_) => {
                return Err(CliError::Usage("multi-setting checkpoint: pass --setting".into()));
            }
        },
    };
    let dir = a
        .output_dir
        .clone()
        .or_else(env_output_dir)
        .unwrap_or_else(|| parent_dir(&a.checkpoint).join("heatmap"));
    let map = match &ck {
        AnyCheckpoint::F32(c) => allocation_heatmap(&c.net, &setting, a.resolution)?,
        AnyCheckpoint::F64(c) => allocation_heatmap(&c.net, &setting, a.resolution)?,
    };
    create_dir(&dir)?;
    let files = map.write_csv(&dir)?;
    let boundary = known_boundary(&setting);
    let overlay = match &boundary {
        Some(segments) => {
            let path = dir.join("overlay.csv");
            write_overlay(&path, segments)?;
            Some(path)
        }
        None => None,
    };
    let svg = if a.svg { map.write_svg(&dir, boundary.as_deref().unwrap_or(&[]))? } else { Vec::new() };
    let deviation = boundary.as_ref().map(|b| map.interior_deviation(b, a.band));
    emit(
        out,
        &json!({
            "setting": setting.label,
            "resolution": a.resolution,
            "files": files,
            "overlay": overlay,
            "svg": svg,
            "interior_deviation": deviation,
        }),
    )
}
