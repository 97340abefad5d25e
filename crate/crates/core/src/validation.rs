//! Evaluation protocols: regret and revenue on held-out profiles, the
//! budget ratio, cross-misreport regret and distillation.

use diffcore::{Real, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::architectures::{Mechanism, MechanismNetwork};
use crate::data::{streams, substream, SettingSource, SettingSpec};
use crate::error::{Error, Result};
use crate::losses::{budget_ratio_of, misreport_profiles};
use crate::training::{optimize_misreports, regret_at, Adam, TrainingData};

/// Inner-search settings used when scoring a mechanism.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub inner_steps: usize,
    pub inner_lr: f64,
    /// Profiles per forward pass.
    pub chunk: usize,
    /// Threads sharing the chunks; results do not depend on it.
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { inner_steps: 1000, inner_lr: 0.1, chunk: 512, workers: 1 }
    }
}

/// Revenue and regret of a mechanism on a set of profiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub setting: String,
    pub n: usize,
    pub m: usize,
    /// Mean payment of each bidder.
    pub payments: Vec<f64>,
    /// Mean regret of each bidder.
    pub regrets: Vec<f64>,
    /// `Σ_i P_i`.
    pub revenue: f64,
    /// `(1/n) Σ_i R_i`.
    pub regret_mean: f64,
    /// Budget ratio against the supplied `r_max` (NaN without one).
    pub ratio: f64,
    pub samples: usize,
    pub inner_steps: usize,
}

impl EvaluationReport {
    pub fn sum_regret(&self) -> f64 {
        self.regrets.iter().sum()
    }
}

/// `(Σ_i R_i / Σ_i P_i) / r_max`, NaN when revenue is zero.
pub fn budget_ratio(report: &EvaluationReport, r_max: f64) -> f64 {
    budget_ratio_of(report.sum_regret(), report.revenue, r_max)
}

/// Splits `[B, ...]` into leading-axis chunks.
fn chunks<T: Real>(t: &Tensor<T>, size: usize) -> Vec<Tensor<T>> {
    let b = t.shape()[0];
    let inner = t.len() / b.max(1);
    (0..b)
        .step_by(size.max(1))
        .map(|start| {
            let end = (start + size.max(1)).min(b);
            let mut shape = t.shape().to_vec();
            shape[0] = end - start;
            Tensor::new(shape, t.data()[start * inner..end * inner].to_vec()).expect("chunk shape")
        })
        .collect()
}

/// Runs `f` over `items` on up to `workers` threads, preserving order.
fn fan_out<I: Sync, R: Send>(items: &[I], workers: usize, f: impl Fn(&I) -> Result<R> + Sync) -> Result<Vec<R>> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let per = items.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items.chunks(per).map(|part| scope.spawn(|| part.iter().map(&f).collect::<Result<Vec<R>>>())).collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

/// Best misreports found against `mech` for every profile, `[B, n, m]`.
pub fn probe_misreports<T: Real, M: Mechanism<T> + ?Sized>(
    mech: &M,
    setting: &SettingSpec,
    profiles: &Tensor<T>,
    cfg: &EvalConfig,
) -> Result<Tensor<T>> {
    let support = setting.support();
    let parts = fan_out(&chunks(profiles, cfg.chunk), cfg.workers, |chunk| {
        let out = optimize_misreports(mech, chunk, &support, cfg.inner_steps, cfg.inner_lr, None)?;
        if !out.aborted.is_empty() {
            log::warn!("{} misreport blocks aborted during evaluation", out.aborted.len());
        }
        Ok(out.misreports)
    })?;
    let data: Vec<T> = parts.into_iter().flat_map(Tensor::into_data).collect();
    Ok(Tensor::new(profiles.shape().to_vec(), data)?)
}

/// Per-bidder mean payments and mean regrets of `mech` at fixed misreports.
/// Truthful reporting stays a candidate, so each per-profile regret is
/// floored at zero.
fn score<T: Real, M: Mechanism<T> + ?Sized>(
    mech: &M,
    profiles: &Tensor<T>,
    misreports: &Tensor<T>,
    cfg: &EvalConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = profiles.shape()[1];
    let pairs: Vec<(Tensor<T>, Tensor<T>)> =
        chunks(profiles, cfg.chunk).into_iter().zip(chunks(misreports, cfg.chunk)).collect();
    let parts = fan_out(&pairs, cfg.workers, |(v, mis)| {
        let regret = regret_at(mech, v, mis)?;
        let pay = mech.outcome(v)?.payment;
        Ok((pay, regret))
    })?;
    let (mut pay, mut reg) = (vec![0.0; n], vec![0.0; n]);
    for (p, r) in &parts {
        for (k, (x, y)) in p.data().iter().zip(r.data()).enumerate() {
            pay[k % n] += x.f64();
            reg[k % n] += y.f64().max(0.0);
        }
    }
    let count = profiles.shape()[0].max(1) as f64;
    pay.iter_mut().for_each(|x| *x /= count);
    reg.iter_mut().for_each(|x| *x /= count);
    Ok((pay, reg))
}

fn report(setting: &SettingSpec, samples: usize, steps: usize, pay: Vec<f64>, reg: Vec<f64>, r_max: Option<f64>) -> EvaluationReport {
    let revenue: f64 = pay.iter().sum();
    let sum_r: f64 = reg.iter().sum();
    EvaluationReport {
        setting: setting.label.clone(),
        n: setting.n,
        m: setting.m,
        regret_mean: sum_r / reg.len().max(1) as f64,
        ratio: r_max.map_or(f64::NAN, |r| budget_ratio_of(sum_r, revenue, r)),
        revenue,
        payments: pay,
        regrets: reg,
        samples,
        inner_steps: steps,
    }
}

fn check_profiles<T: Real>(setting: &SettingSpec, profiles: &Tensor<T>) -> Result<()> {
    let s = profiles.shape();
    if s.len() != 3 || s[1] != setting.n || s[2] != setting.m || s[0] == 0 {
        return Err(Error::InvalidSetting(format!("profiles {s:?} do not belong to setting {}", setting.label)));
    }
    Ok(())
}

/// Revenue and regret of `mech` on `profiles` drawn from `setting`.
///
/// Works for any setting the mechanism accepts, including ones it was not
/// trained on; fixed-size networks reject other shapes.
pub fn evaluate_mechanism<T: Real, M: Mechanism<T> + ?Sized>(
    mech: &M,
    setting: &SettingSpec,
    profiles: &Tensor<T>,
    cfg: &EvalConfig,
    r_max: Option<f64>,
) -> Result<EvaluationReport> {
    check_profiles(setting, profiles)?;
    mech.check_shape(setting.n, setting.m)?;
    let mis = probe_misreports(mech, setting, profiles, cfg)?;
    let (pay, reg) = score(mech, profiles, &mis, cfg)?;
    Ok(report(setting, profiles.shape()[0], cfg.inner_steps, pay, reg, r_max))
}

/// Regret of `target` at the misreports optimized against `prober`.
///
/// For every profile the target's bidder chooses between the truth and the
/// prober's misreport, so a lie that helps against the prober but hurts
/// against the target counts as zero regret rather than a negative one.
pub fn cross_misreport_regret<T: Real, A: Mechanism<T> + ?Sized, B: Mechanism<T> + ?Sized>(
    target: &A,
    prober: &B,
    setting: &SettingSpec,
    profiles: &Tensor<T>,
    cfg: &EvalConfig,
) -> Result<EvaluationReport> {
    check_profiles(setting, profiles)?;
    target.check_shape(setting.n, setting.m)?;
    prober.check_shape(setting.n, setting.m)?;
    let mis = probe_misreports(prober, setting, profiles, cfg)?;
    let (pay, reg) = score(target, profiles, &mis, cfg)?;
    Ok(report(setting, profiles.shape()[0], cfg.inner_steps, pay, reg, None))
}

/// Probability clamp inside every logarithm of the distillation loss.
pub const KL_CLAMP: f64 = 1e-7;

/// `Σ_k p_k (log p_k − log q_k)` with both sides clamped to `[1e-7, 1]`.
pub fn categorical_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| a * (a.clamp(KL_CLAMP, 1.0).ln() - b.clamp(KL_CLAMP, 1.0).ln()))
        .sum()
}

/// KL divergence between Bernoulli(`p`) and Bernoulli(`q`), clamped.
pub fn bernoulli_kl(p: f64, q: f64) -> f64 {
    let c = |x: f64| x.clamp(KL_CLAMP, 1.0 - KL_CLAMP);
    let (p, q) = (c(p), c(q));
    p * (p.ln() - q.ln()) + (1.0 - p) * ((1.0 - p).ln() - (1.0 - q).ln())
}

/// Distillation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub seed: u64,
    /// Held-out profiles for the final report.
    pub eval_samples: usize,
    pub eval: EvalConfig,
    /// Batches whose loss is at most this are treated as already matched and
    /// do not update the student.
    pub kl_tolerance: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            iterations: 2000,
            batch_size: 128,
            lr: 1e-3,
            inner_steps: 25,
            inner_lr: 0.1,
            seed: 0,
            eval_samples: 1024,
            eval: EvalConfig::default(),
            kl_tolerance: 1e-12,
        }
    }
}

/// Teacher/student comparison after distillation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub teacher_revenue: f64,
    pub student_revenue: f64,
    /// Mean regret indexed by `[misreports of][network]`, 0 = teacher and
    /// 1 = student.
    pub regret: [[f64; 2]; 2],
    /// Loss on the last training batch.
    pub final_loss: f64,
    pub iterations: usize,
    /// Iteration at which training stopped on a non-finite loss.
    pub diverged_at: Option<usize>,
}

/// Mean (over profiles) of the allocation and payment-fraction divergences
/// from `teacher` to `student` at `profiles`.
pub fn distillation_kl<T: Real>(
    teacher: &MechanismNetwork<T>,
    student: &MechanismNetwork<T>,
    profiles: &Tensor<T>,
) -> Result<f64> {
    let t = teacher.outcome(profiles)?;
    let s = student.outcome(profiles)?;
    let (b, rows, m) = (t.allocation.shape()[0], t.allocation.shape()[1], t.allocation.shape()[2]);
    let mut total = 0.0;
    for l in 0..b {
        for j in 0..m {
            let col = |o: &Tensor<T>| (0..rows).map(|i| o.at(&[l, i, j]).f64()).collect::<Vec<_>>();
            total += categorical_kl(&col(&t.allocation), &col(&s.allocation));
        }
        for i in 0..rows - 1 {
            total += bernoulli_kl(t.payment_fraction.at(&[l, i]).f64(), s.payment_fraction.at(&[l, i]).f64());
        }
    }
    Ok(total / b.max(1) as f64)
}

/// Differentiable divergence of the student at `bids` from fixed teacher
/// outputs, averaged over the batch.
fn kl_on_tape<T: Real>(
    tape: &mut Tape<T>,
    student: &MechanismNetwork<T>,
    params: &crate::params::Bound,
    bids: &Tensor<T>,
    teacher: &crate::architectures::Outcome<T>,
) -> Result<diffcore::Var> {
    let b = bids.shape()[0] as f64;
    let x = tape.constant(bids.clone());
    let out = student.forward(tape, params, x)?;
    let clamp = |t: &Tensor<T>, hi: f64| t.map(|v| v.max(T::c(KL_CLAMP)).min(T::c(hi)));
    // Allocation: Σ z_t (log z_t − log z_s).
    let zt = tape.constant(teacher.allocation.clone());
    let log_zt = tape.constant(clamp(&teacher.allocation, 1.0).map(|v| v.ln()));
    let zs = tape.clamp(out.allocation, KL_CLAMP, 1.0)?;
    let log_zs = tape.log(zs)?;
    let diff = tape.sub(log_zt, log_zs)?;
    let alloc = tape.mul(zt, diff)?;
    let alloc = tape.sum_all(alloc)?;
    // Payment fractions as Bernoulli variables.
    let pt_val = clamp(&teacher.payment_fraction, 1.0 - KL_CLAMP);
    let pt = tape.constant(pt_val.clone());
    let qt = tape.constant(pt_val.map(|v| T::one() - v));
    let log_pt = tape.constant(pt_val.map(|v| v.ln()));
    let log_qt = tape.constant(pt_val.map(|v| (T::one() - v).ln()));
    let ps = tape.clamp(out.payment_fraction, KL_CLAMP, 1.0 - KL_CLAMP)?;
    let log_ps = tape.log(ps)?;
    let neg = tape.neg(ps)?;
    let qs = tape.add_scalar(neg, 1.0)?;
    let log_qs = tape.log(qs)?;
    let d1 = tape.sub(log_pt, log_ps)?;
    let d1 = tape.mul(pt, d1)?;
    let d2 = tape.sub(log_qt, log_qs)?;
    let d2 = tape.mul(qt, d2)?;
    let pay = tape.add(d1, d2)?;
    let pay = tape.sum_all(pay)?;
    let total = tape.add(alloc, pay)?;
    Ok(tape.scale(total, 1.0 / b)?)
}

fn misreport_tensor<T: Real>(truth: &Tensor<T>, mis: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let m = tape.constant(mis.clone());
    let x = misreport_profiles(&mut tape, truth, m)?;
    Ok(tape.value(x).clone())
}

/// Trains `student` to reproduce `teacher`'s allocations and payment
/// fractions at truthful profiles and at the student's own misreports.
pub fn distill<T: Real>(
    teacher: &MechanismNetwork<T>,
    mut student: MechanismNetwork<T>,
    source: &SettingSource,
    cfg: &DistillConfig,
) -> Result<(MechanismNetwork<T>, DistillReport)> {
    for s in source.settings() {
        teacher.check_shape(s.n, s.m)?;
        student.check_shape(s.n, s.m)?;
    }
    let data = TrainingData {
        source: source.clone(),
        batch_size: cfg.batch_size,
        seed: cfg.seed ^ streams::DISTILL,
        dataset_size: None,
    };
    let mut adam = Adam::new(cfg.lr, student.params().tensors());
    let mut final_loss = f64::NAN;
    let mut diverged_at = None;
    let mut done = 0;
    for it in 0..cfg.iterations {
        let batch = data.batch::<T>(it);
        let mis =
            optimize_misreports(&student, &batch.profiles, &batch.setting.support(), cfg.inner_steps, cfg.inner_lr, None)?;
        let mis_profiles = misreport_tensor(&batch.profiles, &mis.misreports)?;
        let t_truth = teacher.outcome(&batch.profiles)?;
        let t_mis = teacher.outcome(&mis_profiles)?;
        let mut tape = Tape::new();
        let params = student.bind(&mut tape, true);
        let a = kl_on_tape(&mut tape, &student, &params, &batch.profiles, &t_truth)?;
        let b = kl_on_tape(&mut tape, &student, &params, &mis_profiles, &t_mis)?;
        let loss = tape.add(a, b)?;
        final_loss = tape.value(loss).item().f64();
        if !final_loss.is_finite() {
            log::error!("distillation loss became non-finite at iteration {it}");
            diverged_at = Some(it);
            break;
        }
        done = it + 1;
        if final_loss <= cfg.kl_tolerance {
            continue;
        }
        let grads = tape.backward(loss)?;
        let g: Vec<&Tensor<T>> = params.vars().iter().map(|&v| grads.wrt(v)).collect();
        if g.iter().any(|t| !t.is_finite()) {
            log::warn!("skipping distillation step {it}: non-finite gradient");
            continue;
        }
        adam.update(student.params_mut().tensors_mut(), &g);
    }

    // Final report on held-out profiles of the first setting.
    let setting = &source.settings()[0];
    let mut rng = substream(cfg.seed, streams::EVAL);
    let profiles = crate::data::sample_profiles::<T>(setting, cfg.eval_samples, &mut rng);
    let teacher_mis = probe_misreports(teacher, setting, &profiles, &cfg.eval)?;
    let student_mis = probe_misreports(&student, setting, &profiles, &cfg.eval)?;
    let mean_regret = |mech: &MechanismNetwork<T>, mis: &Tensor<T>| -> Result<f64> {
        let (_, reg) = score(mech, &profiles, mis, &cfg.eval)?;
        Ok(reg.iter().sum::<f64>() / reg.len() as f64)
    };
    let regret = [
        [mean_regret(teacher, &teacher_mis)?, mean_regret(&student, &teacher_mis)?],
        [mean_regret(teacher, &student_mis)?, mean_regret(&student, &student_mis)?],
    ];
    let revenue = |mech: &MechanismNetwork<T>| -> Result<f64> {
        let pay = mech.outcome(&profiles)?.payment;
        Ok(pay.data().iter().map(|x| x.f64()).sum::<f64>() / cfg.eval_samples.max(1) as f64)
    };
    let report = DistillReport {
        teacher_revenue: revenue(teacher)?,
        student_revenue: revenue(&student)?,
        regret,
        final_loss,
        iterations: done,
        diverged_at,
    };
    Ok((student, report))
}
