use diffcore::{Real, Tape, Tensor};

use crate::architectures::Mechanism;
use crate::data::Support;
use crate::error::{Error, Result};
use crate::losses::misreport_utilities;
use crate::training::Adam;

/// Result of the inner misreport search over a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct MisreportOutcome<T: Real> {
    /// Best misreport found for each `(sample, bidder)`, `[B, n, m]`.
    pub misreports: Tensor<T>,
    /// Utility gain of the best misreport over truthful bidding, `[B, n]`.
    pub regret: Tensor<T>,
    /// Truthful utilities, `[B, n]`.
    pub truthful_utility: Tensor<T>,
    /// `(sample, bidder)` blocks abandoned after a non-finite utility.
    pub aborted: Vec<(usize, usize)>,
}

/// Utility of each bidder when reporting `misreports` (`[B, n, m]`) against
/// truthful opponents, valued at its true row of `profiles`.
pub fn utilities_at<T: Real, M: Mechanism<T> + ?Sized>(
    mech: &M,
    profiles: &Tensor<T>,
    misreports: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let params = mech.bind(&mut tape, false);
    let mis = tape.constant(misreports.clone());
    let u = misreport_utilities(&mut tape, mech, &params, profiles, mis)?;
    Ok(tape.value(u).clone())
}

/// Regret of each bidder at the given misreports (no optimization),
/// `u(misreport) − u(truth)`, `[B, n]`.
pub fn regret_at<T: Real, M: Mechanism<T> + ?Sized>(
    mech: &M,
    profiles: &Tensor<T>,
    misreports: &Tensor<T>,
) -> Result<Tensor<T>> {
    let gain = utilities_at(mech, profiles, misreports)?;
    let base = utilities_at(mech, profiles, profiles)?;
    Ok(Tensor::from_fn(gain.shape().to_vec(), |k| gain.data()[k] - base.data()[k]))
}

fn clamp_to_support<T: Real>(x: &mut Tensor<T>, support: &Support) {
    let m = support.lo.len();
    for (k, v) in x.data_mut().iter_mut().enumerate() {
        let j = k % m;
        *v = v.max(T::c(support.lo[j])).min(T::c(support.hi[j]));
    }
}

/// Gradient ascent on each bidder's utility over its own report.
///
/// Every `(sample, bidder)` block starts from `init` (truthful when `None`),
/// takes `steps` Adam updates with learning rate `lr`, is clamped to
/// `support` after each update, and keeps the best iterate seen (the
/// truthful report included), so the returned regret is never negative.
/// Mechanism parameters are only read.
pub fn optimize_misreports<T: Real, M: Mechanism<T> + ?Sized>(
    mech: &M,
    profiles: &Tensor<T>,
    support: &Support,
    steps: usize,
    lr: f64,
    init: Option<&Tensor<T>>,
) -> Result<MisreportOutcome<T>> {
    let shape = profiles.shape().to_vec();
    if shape.len() != 3 || support.lo.len() != shape[2] {
        return Err(Error::InvalidSetting(format!(
            "profiles {shape:?} do not match a support over {} items",
            support.lo.len()
        )));
    }
    mech.check_shape(shape[1], shape[2])?;
    let (b, n, m) = (shape[0], shape[1], shape[2]);
    let truthful = match init {
        Some(_) => Some(utilities_at(mech, profiles, profiles)?),
        None => None,
    };
    let mut current = match init {
        Some(start) => {
            let mut start = start.clone();
            clamp_to_support(&mut start, support);
            start
        }
        None => profiles.clone(),
    };
    let mut best = profiles.clone();
    let mut best_util = vec![T::neg_infinity(); b * n];
    let mut base_util = truthful.as_ref().map(|t| t.data().to_vec());
    let mut active = vec![true; b * n];
    let mut aborted = Vec::new();
    let mut adam = Adam::new(lr, [&current]);

    for step in 0..=steps {
        let mut tape = Tape::new();
        let params = mech.bind(&mut tape, false);
        let mis = tape.leaf(current.clone(), step < steps);
        let util = misreport_utilities(&mut tape, mech, &params, profiles, mis)?;
        let values = tape.value(util).data().to_vec();
        if base_util.is_none() {
            base_util = Some(values.clone());
        }
        let base = base_util.as_ref().expect("truthful utilities");
        for (blk, &u) in values.iter().enumerate() {
            if !active[blk] {
                continue;
            }
            if !u.is_finite() {
                active[blk] = false;
                aborted.push((blk / n, blk % n));
                log::warn!("misreport block (sample {}, bidder {}) hit a non-finite utility; keeping its best iterate", blk / n, blk % n);
                continue;
            }
            if best_util[blk] == T::neg_infinity() {
                // Truthful reporting is always a candidate.
                best_util[blk] = base[blk];
                best.data_mut()[blk * m..(blk + 1) * m].copy_from_slice(&profiles.data()[blk * m..(blk + 1) * m]);
            }
            if u > best_util[blk] {
                best_util[blk] = u;
                best.data_mut()[blk * m..(blk + 1) * m].copy_from_slice(&current.data()[blk * m..(blk + 1) * m]);
            }
        }
        if step == steps || !active.iter().any(|&a| a) {
            break;
        }
        let total = tape.sum_all(util)?;
        let loss = tape.neg(total)?;
        let grads = tape.backward(loss)?;
        let mut targets = [current];
        adam.update(&mut targets, &[grads.wrt(mis)]);
        let [mut next] = targets;
        clamp_to_support(&mut next, support);
        for (blk, &live) in active.iter().enumerate() {
            if !live {
                next.data_mut()[blk * m..(blk + 1) * m].copy_from_slice(&best.data()[blk * m..(blk + 1) * m]);
            }
        }
        current = next;
    }

    let base = base_util.expect("at least one forward pass");
    let regret = Tensor::from_fn([b, n], |k| {
        if best_util[k] == T::neg_infinity() {
            T::zero()
        } else {
            best_util[k] - base[k]
        }
    });
    Ok(MisreportOutcome { misreports: best, regret, truthful_utility: Tensor::new([b, n], base)?, aborted })
}
