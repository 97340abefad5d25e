//! Inner misreport loss, the two outer objectives and their multiplier
//! schedules.
//!
//! The budget objective maximizes revenue subject to `ΣR / ΣP ≤ R_max`
//! through a single multiplier `γ` updated by dual gradient steps in log
//! space; the Lagrangian objective keeps one multiplier per bidder plus a
//! quadratic penalty.

use diffcore::{Real, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::architectures::Mechanism;
use crate::error::Result;
use crate::params::Bound;

/// Floor applied to the summed regret inside the logarithm of the dual step.
pub const REGRET_LOG_FLOOR: f64 = 1e-12;

/// Multiplier and budget schedule of the budget objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub gamma: f64,
    pub gamma_lr: f64,
    pub r_max: f64,
    pub r_max_end: f64,
    pub r_max_mult: f64,
}

impl DualState {
    /// `γ = 1`, `γ_Δ = 0.5`, `R_max` annealed from `r_max_start` to
    /// `r_max_end` over `schedule_steps` schedule steps.
    pub fn new(r_max_start: f64, r_max_end: f64, schedule_steps: usize) -> Self {
        DualState {
            gamma: 1.0,
            gamma_lr: 0.5,
            r_max: r_max_start,
            r_max_end,
            r_max_mult: schedule_multiplier(r_max_start, r_max_end, schedule_steps),
        }
    }
}

/// Per-step decay so that `start · mult^k` reaches `end` after `k` equal to
/// two thirds of `total_steps`.
pub fn schedule_multiplier(start: f64, end: f64, total_steps: usize) -> f64 {
    if total_steps == 0 || start <= end {
        return 1.0;
    }
    let reach = 2.0 * total_steps as f64 / 3.0;
    (end / start).powf(1.0 / reach)
}

/// `γ ← max(0, γ + γ_Δ (log(ΣR / ΣP) − log R_max))`; skipped when
/// `ΣP ≤ 0`.
pub fn dual_update(state: &DualState, sum_r: f64, sum_p: f64) -> DualState {
    let mut next = state.clone();
    if !(sum_p > 0.0) || !sum_r.is_finite() {
        return next;
    }
    let ratio = sum_r.max(REGRET_LOG_FLOOR) / sum_p;
    next.gamma = (state.gamma + state.gamma_lr * (ratio.ln() - state.r_max.ln())).max(0.0);
    next
}

/// `R_max ← max(R_max^end, mult · R_max)`.
pub fn budget_schedule_step(state: &DualState) -> DualState {
    let mut next = state.clone();
    next.r_max = (state.r_max * state.r_max_mult).max(state.r_max_end);
    next
}

/// Multipliers of the augmented Lagrangian objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagrangianState {
    pub lambdas: Vec<f64>,
    pub rho: f64,
    pub rho_lr: f64,
    /// Outer iterations between multiplier updates.
    pub update_period: usize,
}

/// `λ_i ← λ_i + ρ R_i`, then `ρ ← ρ + ρ_Δ`.
pub fn lagrangian_multiplier_update(state: &LagrangianState, regrets: &[f64]) -> LagrangianState {
    let mut next = state.clone();
    for (l, r) in next.lambdas.iter_mut().zip(regrets) {
        *l += state.rho * r;
    }
    next.rho = state.rho + state.rho_lr;
    next
}

/// Batch statistics of one training step or validation pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Mean payment of each bidder.
    pub payments: Vec<f64>,
    /// Mean estimated regret of each bidder.
    pub regrets: Vec<f64>,
    /// `Σ_i P_i`.
    pub revenue: f64,
    /// `(1/n) Σ_i R_i`.
    pub regret_mean: f64,
    /// `(Σ_i R_i / Σ_i P_i) / r_max`; NaN without a budget or revenue.
    pub ratio: f64,
    /// Budget multiplier in force (NaN for the Lagrangian objective).
    pub gamma: f64,
    /// Budget in force (NaN for the Lagrangian objective).
    pub r_max: f64,
}

impl MetricsRecord {
    pub fn new(payments: Vec<f64>, regrets: Vec<f64>, r_max: f64, gamma: f64) -> Self {
        let revenue: f64 = payments.iter().sum();
        let sum_r: f64 = regrets.iter().sum();
        let regret_mean = sum_r / regrets.len().max(1) as f64;
        let ratio = budget_ratio_of(sum_r, revenue, r_max);
        MetricsRecord { payments, regrets, revenue, regret_mean, ratio, gamma, r_max }
    }

    pub fn sum_regret(&self) -> f64 {
        self.regrets.iter().sum()
    }
}

/// `(ΣR / ΣP) / r_max`, NaN when revenue is not positive.
pub fn budget_ratio_of(sum_r: f64, sum_p: f64, r_max: f64) -> f64 {
    if sum_p > 0.0 && r_max > 0.0 {
        sum_r / sum_p / r_max
    } else {
        f64::NAN
    }
}

/// `−Σ_i P_i + γ Σ_i R_i` for per-bidder means `P` and `R` (shape `[n]`).
pub fn outer_loss_budget<T: Real>(tape: &mut Tape<T>, payments: Var, regrets: Var, gamma: f64) -> Result<Var> {
    let neg = tape.neg(payments)?;
    let pen = tape.scale(regrets, gamma)?;
    let per = tape.add(neg, pen)?;
    Ok(tape.sum_all(per)?)
}

/// `Σ_i [−P_i + λ_i R_i + (ρ/2) R_i²]`.
pub fn outer_loss_lagrangian<T: Real>(
    tape: &mut Tape<T>,
    payments: Var,
    regrets: Var,
    state: &LagrangianState,
) -> Result<Var> {
    let neg = tape.neg(payments)?;
    let lambdas = tape.constant(Tensor::from_f64([state.lambdas.len()], &state.lambdas)?);
    let pen = tape.mul(regrets, lambdas)?;
    let mut per = tape.add(neg, pen)?;
    if state.rho != 0.0 {
        let sq = tape.mul(regrets, regrets)?;
        let quad = tape.scale(sq, state.rho / 2.0)?;
        per = tape.add(per, quad)?;
    }
    Ok(tape.sum_all(per)?)
}

/// Profiles in which row `k` of copy `(l, k)` is the misreport `M[l, k]`
/// and every other row is the truthful `V[l]`, shaped `[B·n, n, m]`.
pub fn misreport_profiles<T: Real>(tape: &mut Tape<T>, truth: &Tensor<T>, misreports: Var) -> Result<Var> {
    let (b, n, m) = (truth.shape()[0], truth.shape()[1], truth.shape()[2]);
    let v = truth.data();
    let others = Tensor::from_fn([b, n, n, m], |f| {
        let (j, i, k, l) = (f % m, (f / m) % n, (f / (m * n)) % n, f / (m * n * n));
        if i == k {
            T::zero()
        } else {
            v[(l * n + i) * m + j]
        }
    });
    let selector = Tensor::from_fn([n, n, 1], |f| if f / n == f % n { T::one() } else { T::zero() });
    let others = tape.constant(others);
    let selector = tape.constant(selector);
    let rows = tape.reshape(misreports, &[b, n, 1, m])?;
    let placed = tape.mul(rows, selector)?;
    let x = tape.add(others, placed)?;
    Ok(tape.reshape(x, &[b * n, n, m])?)
}

/// Utility of bidder `k` in copy `(l, k)` of [`misreport_profiles`], valued
/// at the truthful `V[l, k]`; shape `[B, n]`.
pub fn misreport_utilities<T: Real, M: Mechanism<T> + ?Sized>(
    tape: &mut Tape<T>,
    mech: &M,
    params: &Bound,
    truth: &Tensor<T>,
    misreports: Var,
) -> Result<Var> {
    let (b, n, m) = (truth.shape()[0], truth.shape()[1], truth.shape()[2]);
    let x = misreport_profiles(tape, truth, misreports)?;
    let out = mech.forward(tape, params, x)?;
    let v = truth.data();
    let weights = Tensor::from_fn([b, n, n, m], |f| {
        let (j, i, k, l) = (f % m, (f / m) % n, (f / (m * n)) % n, f / (m * n * n));
        if i == k {
            v[(l * n + k) * m + j]
        } else {
            T::zero()
        }
    });
    let weights = tape.constant(weights);
    let z = tape.narrow(out.allocation, 1, 0, n)?;
    let z = tape.reshape(z, &[b, n, n, m])?;
    let value = tape.mul(z, weights)?;
    let value = tape.sum(value, 3, false)?;
    let value = tape.sum(value, 2, false)?;
    let eye = tape.constant(Tensor::from_fn([n, n], |f| if f / n == f % n { T::one() } else { T::zero() }));
    let pay = tape.reshape(out.payment, &[b, n, n])?;
    let pay = tape.mul(pay, eye)?;
    let pay = tape.sum(pay, 2, false)?;
    Ok(tape.sub(value, pay)?)
}

/// Truthful utilities `Σ_j z_ij v_ij − p_i` for every profile, `[B, n]`,
/// together with the payments `[B, n]`.
pub fn truthful_utilities<T: Real, M: Mechanism<T> + ?Sized>(
    tape: &mut Tape<T>,
    mech: &M,
    params: &Bound,
    truth: &Tensor<T>,
) -> Result<(Var, Var)> {
    let n = truth.shape()[1];
    let bids = tape.constant(truth.clone());
    let out = mech.forward(tape, params, bids)?;
    let z = tape.narrow(out.allocation, 1, 0, n)?;
    let value = tape.mul(z, bids)?;
    let value = tape.sum(value, 2, false)?;
    Ok((tape.sub(value, out.payment)?, out.payment))
}

/// Negated utility of bidder `i` reporting `misreport` (`[m]`) at the
/// single profile `truth` (`[1, n, m]`), valued at the truthful row.
pub fn inner_loss<T: Real, M: Mechanism<T> + ?Sized>(
    tape: &mut Tape<T>,
    mech: &M,
    params: &Bound,
    truth: &Tensor<T>,
    i: usize,
    misreport: Var,
) -> Result<Var> {
    let (n, m) = (truth.shape()[1], truth.shape()[2]);
    let mut rows = Vec::with_capacity(n);
    for k in 0..n {
        if k == i {
            rows.push(tape.reshape(misreport, &[1, 1, m])?);
        } else {
            let row = Tensor::new([1, 1, m], truth.data()[k * m..(k + 1) * m].to_vec())?;
            rows.push(tape.constant(row));
        }
    }
    let bids = tape.concat(&rows, 1)?;
    let out = mech.forward(tape, params, bids)?;
    let z = tape.narrow(out.allocation, 1, i, 1)?;
    let own = tape.constant(Tensor::new([1, 1, m], truth.data()[i * m..(i + 1) * m].to_vec())?);
    let value = tape.mul(z, own)?;
    let value = tape.sum_all(value)?;
    let pay = tape.narrow(out.payment, 1, i, 1)?;
    let pay = tape.sum_all(pay)?;
    let util = tape.sub(value, pay)?;
    Ok(tape.neg(util)?)
}
