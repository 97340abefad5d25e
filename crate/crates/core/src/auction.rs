//! Auction semantics and analytic truthful baselines.
//!
//! Valuations are additive: bidder `i` values a (possibly randomized)
//! allocation `z_i` at `Σ_j z_ij v_ij`. The baselines (VCG, item-wise and
//! bundled Myerson) are dominant-strategy truthful and individually rational;
//! they also implement [`Mechanism`] as bid-independent-gradient constants so
//! the neural evaluation pipeline can score them.

use diffcore::{Real, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::architectures::{ForwardOutput, Mechanism};
use crate::data::{streams, substream, SettingSpec, Support};
use crate::error::{Error, Result};
use crate::params::Bound;

/// An `n x m` matrix of nonnegative additive valuations (or bids).
#[derive(Clone, Debug, PartialEq)]
pub struct ValuationProfile {
    pub n: usize,
    pub m: usize,
    values: Vec<f64>,
}

impl ValuationProfile {
    pub fn new(n: usize, m: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 || m == 0 || values.len() != n * m {
            return Err(Error::InvalidSetting(format!("{} values do not form a {n}x{m} profile", values.len())));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidSetting(format!("valuation {bad} is not a finite nonnegative number")));
        }
        Ok(ValuationProfile { n, m, values })
    }

    /// Profile `index` of a `[B, n, m]` tensor.
    pub fn from_tensor<T: Real>(profiles: &Tensor<T>, index: usize) -> Result<Self> {
        let (n, m) = (profiles.shape()[1], profiles.shape()[2]);
        let row = profiles.row(index);
        Self::new(n, m, row.data().iter().map(|x| x.f64()).collect())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.m + j]
    }

    pub fn bidder(&self, i: usize) -> &[f64] {
        &self.values[i * self.m..(i + 1) * self.m]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Copy with bidder `i`'s row replaced by `report`.
    pub fn with_report(&self, i: usize, report: &[f64]) -> Self {
        let mut out = self.clone();
        out.values[i * self.m..(i + 1) * self.m].copy_from_slice(report);
        out
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_f64([1, self.n, self.m], &self.values).expect("profile shape")
    }
}

/// Allocation probabilities of the real bidders and their payments.
#[derive(Clone, Debug, PartialEq)]
pub struct MechanismOutcome {
    pub n: usize,
    pub m: usize,
    /// Row-major `n x m`.
    pub allocation: Vec<f64>,
    pub payments: Vec<f64>,
}

impl MechanismOutcome {
    pub fn empty(n: usize, m: usize) -> Self {
        MechanismOutcome { n, m, allocation: vec![0.0; n * m], payments: vec![0.0; n] }
    }

    pub fn z(&self, i: usize, j: usize) -> f64 {
        self.allocation[i * self.m + j]
    }
}

/// `Σ_j z_ij v_ij − p_i`.
pub fn utility(i: usize, v: &ValuationProfile, outcome: &MechanismOutcome) -> f64 {
    (0..v.m).map(|j| outcome.z(i, j) * v.get(i, j)).sum::<f64>() - outcome.payments[i]
}

/// `Σ_i p_i`.
pub fn revenue(outcome: &MechanismOutcome) -> f64 {
    outcome.payments.iter().sum()
}

/// Highest and second-highest bid on item `j`; ties go to the lower index.
fn top_two(v: &ValuationProfile, j: usize) -> (usize, f64, f64) {
    let mut best = (0, v.get(0, j));
    let mut second = f64::NEG_INFINITY;
    for i in 1..v.n {
        let b = v.get(i, j);
        if b > best.1 {
            second = best.1;
            best = (i, b);
        } else if b > second {
            second = b;
        }
    }
    (best.0, best.1, second)
}

/// Per-item second-price auction without reserve.
pub fn vcg_run(v: &ValuationProfile) -> MechanismOutcome {
    let mut out = MechanismOutcome::empty(v.n, v.m);
    for j in 0..v.m {
        let (winner, _, second) = top_two(v, j);
        out.allocation[winner * v.m + j] = 1.0;
        out.payments[winner] += second.max(0.0);
    }
    out
}

/// Per-item second-price auction with reserve `reserves[j]`.
pub fn myerson_itemwise_with_reserves(v: &ValuationProfile, reserves: &[f64]) -> MechanismOutcome {
    let mut out = MechanismOutcome::empty(v.n, v.m);
    for j in 0..v.m {
        let (winner, top, second) = top_two(v, j);
        if top >= reserves[j] {
            out.allocation[winner * v.m + j] = 1.0;
            out.payments[winner] += second.max(reserves[j]);
        }
    }
    out
}

/// Optimal reserve for `U[lo, hi]`: the root of `2t − hi`, clipped to the
/// support.
pub fn uniform_reserve(lo: f64, hi: f64) -> f64 {
    (hi / 2.0).max(lo)
}

/// Item-wise Myerson for unit-uniform valuations (reserve 0.5).
pub fn myerson_itemwise_run(v: &ValuationProfile) -> MechanismOutcome {
    myerson_itemwise_with_reserves(v, &vec![0.5; v.m])
}

/// Grid points of the bundle-value table (the last point lands on `m`).
pub const IRWIN_HALL_POINTS: usize = 10_001;

/// Irwin–Hall(`m`) CDF, density and monotonized virtual value on a grid
/// over `[0, m]`.
#[derive(Clone, Debug)]
pub struct IrwinHallTable {
    pub m: usize,
    step: f64,
    cdf: Vec<f64>,
    pdf: Vec<f64>,
    virtual_value: Vec<f64>,
}

/// Closed-form Irwin–Hall CDF and density for `m <= 3`.
fn irwin_hall_closed(m: usize, t: f64) -> (f64, f64) {
    let t = t.clamp(0.0, m as f64);
    match m {
        1 => (t, 1.0),
        2 => {
            if t <= 1.0 {
                (t * t / 2.0, t)
            } else {
                let s = 2.0 - t;
                (1.0 - s * s / 2.0, s)
            }
        }
        3 => {
            if t <= 1.0 {
                (t.powi(3) / 6.0, t * t / 2.0)
            } else if t <= 2.0 {
                let cdf = (-2.0 * t.powi(3) + 9.0 * t * t - 9.0 * t + 3.0) / 6.0;
                (cdf, (-2.0 * t * t + 6.0 * t - 3.0) / 2.0)
            } else {
                let s = 3.0 - t;
                (1.0 - s.powi(3) / 6.0, s * s / 2.0)
            }
        }
        _ => unreachable!("closed forms cover m <= 3"),
    }
}

impl IrwinHallTable {
    pub fn new(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidSetting("bundle of zero items".into()));
        }
        let (grid, cdf, pdf) = if m <= 3 {
            let step = m as f64 / (IRWIN_HALL_POINTS - 1) as f64;
            let (cdf, pdf) = (0..IRWIN_HALL_POINTS).map(|k| irwin_hall_closed(m, k as f64 * step)).unzip();
            (step, cdf, pdf)
        } else {
            Self::convolved(m)
        };
        let virtual_value = Self::monotone_virtual_values(m, grid, &cdf, &pdf);
        Ok(IrwinHallTable { m, step: grid, cdf, pdf, virtual_value })
    }

    /// Density of a sum of `m` uniforms by repeated convolution with the unit
    /// box, `f_{k+1}(t) = F_k(t) − F_k(t − 1)`, on a grid with an integer
    /// number of points per unit.
    fn convolved(m: usize) -> (f64, Vec<f64>, Vec<f64>) {
        let per_unit = (IRWIN_HALL_POINTS - 1).div_ceil(m);
        let step = 1.0 / per_unit as f64;
        let points = m * per_unit + 1;
        // Start from Irwin–Hall(2), whose density is piecewise linear and
        // therefore exact under trapezoidal integration.
        let mut pdf: Vec<f64> = (0..points).map(|k| irwin_hall_closed(2, k as f64 * step).1).collect();
        let mut cdf = vec![0.0; points];
        for k in 2..m {
            let support_end = k * per_unit;
            for i in 1..points {
                cdf[i] = cdf[i - 1] + 0.5 * step * (pdf[i - 1] + pdf[i]);
            }
            for i in support_end + 1..points {
                cdf[i] = 1.0;
            }
            let mut next = vec![0.0; points];
            for (i, x) in next.iter_mut().enumerate() {
                let lagged = if i >= per_unit { cdf[i - per_unit] } else { 0.0 };
                *x = (cdf[i] - lagged).max(0.0);
            }
            pdf = next;
        }
        for i in 1..points {
            cdf[i] = cdf[i - 1] + 0.5 * step * (pdf[i - 1] + pdf[i]);
        }
        let total = cdf[points - 1];
        cdf.iter_mut().for_each(|c| *c = (*c / total).min(1.0));
        pdf.iter_mut().for_each(|f| *f /= total);
        (step, cdf, pdf)
    }

    fn monotone_virtual_values(m: usize, step: f64, cdf: &[f64], pdf: &[f64]) -> Vec<f64> {
        let mut running = f64::NEG_INFINITY;
        (0..cdf.len())
            .map(|k| {
                let t = k as f64 * step;
                let raw = if k + 1 == cdf.len() {
                    m as f64
                } else if pdf[k] > 0.0 {
                    t - (1.0 - cdf[k]) / pdf[k]
                } else {
                    f64::NEG_INFINITY
                };
                running = running.max(raw);
                running
            })
            .collect()
    }

    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let max = self.m as f64;
        if !(0.0..=max).contains(&t) {
            return Err(Error::TableCoverage { value: t, max });
        }
        let pos = t / self.step;
        let k = (pos.floor() as usize).min(self.cdf.len() - 2);
        Ok((k, pos - k as f64))
    }

    fn interp(table: &[f64], k: usize, w: f64) -> f64 {
        if w == 0.0 {
            table[k]
        } else {
            table[k] * (1.0 - w) + table[k + 1] * w
        }
    }

    pub fn cdf(&self, t: f64) -> Result<f64> {
        let (k, w) = self.locate(t)?;
        Ok(Self::interp(&self.cdf, k, w))
    }

    pub fn pdf(&self, t: f64) -> Result<f64> {
        let (k, w) = self.locate(t)?;
        Ok(Self::interp(&self.pdf, k, w))
    }

    /// Monotonized virtual value `t − (1 − F(t)) / f(t)`.
    pub fn virtual_value(&self, t: f64) -> Result<f64> {
        let (k, w) = self.locate(t)?;
        let (a, b) = (self.virtual_value[k], self.virtual_value[k + 1]);
        Ok(if w == 0.0 || a == f64::NEG_INFINITY { if w == 0.0 { a } else { b.min(a) } } else { a * (1.0 - w) + b * w })
    }

    /// Smallest bundle value whose virtual value reaches `target`.
    pub fn threshold(&self, target: f64) -> f64 {
        let vv = &self.virtual_value;
        let k = vv.partition_point(|&x| x < target);
        if k == 0 {
            return 0.0;
        }
        if k == vv.len() {
            return self.m as f64;
        }
        let (a, b) = (vv[k - 1], vv[k]);
        let frac = if a.is_finite() && b > a { (target - a) / (b - a) } else { 1.0 };
        ((k - 1) as f64 + frac) * self.step
    }

    /// Posted price of the single-bidder bundle auction.
    pub fn reserve(&self) -> f64 {
        self.threshold(0.0)
    }
}

/// Myerson auction on bundle values: the bidder with the largest positive
/// virtual bundle value takes every item and pays the smallest bundle bid
/// that would still have won.
pub fn myerson_bundled_run(v: &ValuationProfile, table: &IrwinHallTable) -> Result<MechanismOutcome> {
    let mut phis = Vec::with_capacity(v.n);
    let mut bundles = Vec::with_capacity(v.n);
    for i in 0..v.n {
        let t: f64 = v.bidder(i).iter().sum();
        phis.push(table.virtual_value(t)?);
        bundles.push(t);
    }
    let mut out = MechanismOutcome::empty(v.n, v.m);
    let mut winner = 0;
    for i in 1..v.n {
        if phis[i] > phis[winner] {
            winner = i;
        }
    }
    let rival = (0..v.n).filter(|&k| k != winner).map(|k| phis[k]).fold(0.0f64, f64::max);
    let price = table.threshold(rival);
    if phis[winner] < rival || bundles[winner] < price {
        return Ok(out);
    }
    for j in 0..v.m {
        out.allocation[winner * v.m + j] = 1.0;
    }
    out.payments[winner] = price;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    Vcg,
    MyersonItemwise,
    MyersonBundled,
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vcg" => Ok(BaselineKind::Vcg),
            "myerson-itemwise" => Ok(BaselineKind::MyersonItemwise),
            "myerson-bundled" => Ok(BaselineKind::MyersonBundled),
            other => Err(Error::Config(format!(
                "unknown mechanism `{other}` (expected vcg, myerson-itemwise or myerson-bundled)"
            ))),
        }
    }
}

impl std::fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BaselineKind::Vcg => "vcg",
            BaselineKind::MyersonItemwise => "myerson-itemwise",
            BaselineKind::MyersonBundled => "myerson-bundled",
        })
    }
}

/// An analytic mechanism bound to a valuation setting.
#[derive(Clone, Debug)]
pub struct BaselineMechanism {
    pub kind: BaselineKind,
    pub setting: SettingSpec,
    reserves: Vec<f64>,
    table: Option<IrwinHallTable>,
}

impl BaselineMechanism {
    pub fn new(kind: BaselineKind, setting: SettingSpec) -> Result<Self> {
        setting.validate()?;
        let reserves = setting.lo.iter().zip(&setting.hi).map(|(&lo, &hi)| uniform_reserve(lo, hi)).collect();
        let table = match kind {
            BaselineKind::MyersonBundled => {
                if !setting.is_unit_uniform() {
                    return Err(Error::InvalidSetting(
                        "bundled Myerson assumes U[0, 1] valuations for every item".into(),
                    ));
                }
                Some(IrwinHallTable::new(setting.m)?)
            }
            _ => None,
        };
        Ok(BaselineMechanism { kind, setting, reserves, table })
    }

    pub fn run(&self, v: &ValuationProfile) -> Result<MechanismOutcome> {
        match self.kind {
            BaselineKind::Vcg => Ok(vcg_run(v)),
            BaselineKind::MyersonItemwise => Ok(myerson_itemwise_with_reserves(v, &self.reserves)),
            BaselineKind::MyersonBundled => myerson_bundled_run(v, self.table.as_ref().expect("bundle table")),
        }
    }
}

impl<T: Real> Mechanism<T> for BaselineMechanism {
    fn name(&self) -> String {
        self.kind.to_string()
    }

    fn check_shape(&self, n: usize, m: usize) -> Result<()> {
        if m != self.setting.m || n == 0 {
            return Err(Error::InvalidSetting(format!(
                "{} was built for {} items, got {n}x{m}",
                self.kind, self.setting.m
            )));
        }
        Ok(())
    }

    fn bind(&self, _tape: &mut Tape<T>, _requires_grad: bool) -> Bound {
        Bound::empty()
    }

    /// Outcomes enter the tape as constants: the mechanism is piecewise
    /// constant in the bids, so its gradient is zero almost everywhere.
    fn forward(&self, tape: &mut Tape<T>, _params: &Bound, bids: Var) -> Result<ForwardOutput> {
        let shape = tape.shape(bids).to_vec();
        let (b, n, m) = (shape[0], shape[1], shape[2]);
        Mechanism::<T>::check_shape(self, n, m)?;
        let values = tape.value(bids).clone();
        let mut alloc = Vec::with_capacity(b * (n + 1) * m);
        let mut fraction = Vec::with_capacity(b * n);
        let mut pay = Vec::with_capacity(b * n);
        for l in 0..b {
            let v = ValuationProfile::from_tensor(&values, l)?;
            let out = self.run(&v)?;
            alloc.extend(out.allocation.iter().copied());
            for j in 0..m {
                alloc.push(1.0 - (0..n).map(|i| out.z(i, j)).sum::<f64>());
            }
            for i in 0..n {
                let value: f64 = (0..m).map(|j| out.z(i, j) * v.get(i, j)).sum();
                fraction.push(if value > 0.0 { (out.payments[i] / value).min(1.0) } else { 0.0 });
                pay.push(out.payments[i]);
            }
        }
        let allocation = tape.constant(Tensor::from_f64([b, n + 1, m], &alloc)?);
        let payment_fraction = tape.constant(Tensor::from_f64([b, n], &fraction)?);
        let payment = tape.constant(Tensor::from_f64([b, n], &pay)?);
        Ok(ForwardOutput { allocation, payment_fraction, payment, logits: None })
    }
}

/// Monte-Carlo mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
    pub samples: usize,
}

/// Expected revenue of `mechanism` over `samples` profiles from `setting`.
pub fn monte_carlo_revenue(mechanism: &BaselineMechanism, samples: usize, seed: u64) -> Result<Estimate> {
    let setting = &mechanism.setting;
    let mut rng = substream(seed, streams::MONTE_CARLO);
    let (n, m) = (setting.n, setting.m);
    let mut values = vec![0.0; n * m];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..samples {
        for (k, v) in values.iter_mut().enumerate() {
            let j = k % m;
            *v = setting.lo[j] + (setting.hi[j] - setting.lo[j]) * rng.gen::<f64>();
        }
        let profile = ValuationProfile { n, m, values: values.clone() };
        let r = revenue(&mechanism.run(&profile)?);
        sum += r;
        sum_sq += r * r;
    }
    let count = samples.max(1) as f64;
    let mean = sum / count;
    let var = (sum_sq / count - mean * mean).max(0.0);
    Ok(Estimate { mean, std_err: (var / count).sqrt(), samples })
}

/// Upper bound on grid points the regret oracle will enumerate.
pub const MAX_ORACLE_POINTS: u128 = 1 << 21;

/// Profiles evaluated per forward pass inside the oracle.
const ORACLE_CHUNK: usize = 2048;

/// Utilities of bidder `i` (valued at `v`) for each report in `reports`
/// (flattened `k x m`).
fn utilities_for_reports<T: Real, M: Mechanism<T> + ?Sized>(
    mech: &M,
    v: &ValuationProfile,
    i: usize,
    reports: &[f64],
) -> Result<Vec<f64>> {
    let (n, m) = (v.n, v.m);
    let count = reports.len() / m;
    let mut data = Vec::with_capacity(count * n * m);
    for r in 0..count {
        for k in 0..n {
            if k == i {
                data.extend_from_slice(&reports[r * m..(r + 1) * m]);
            } else {
                data.extend_from_slice(v.bidder(k));
            }
        }
    }
    let profiles = Tensor::<T>::from_f64([count, n, m], &data)?;
    let out = mech.outcome(&profiles)?;
    let (z, p) = (out.allocation.data(), out.payment.data());
    Ok((0..count)
        .map(|r| {
            let base = r * (n + 1) * m + i * m;
            let value: f64 = (0..m).map(|j| z[base + j].f64() * v.get(i, j)).sum();
            value - p[r * n + i].f64()
        })
        .collect())
}

/// Exact (up to grid resolution) regret of bidder `i` at profile `v`:
/// the best utility over a `resolution^m` grid of misreports spanning
/// `support`, plus the truthful report, minus the truthful utility.
///
/// `resolution == 0` enumerates only the truthful report.
pub fn exact_regret_oracle<T: Real, M: Mechanism<T> + ?Sized>(
    mech: &M,
    v: &ValuationProfile,
    i: usize,
    resolution: usize,
    support: &Support,
) -> Result<f64> {
    let m = v.m;
    if i >= v.n {
        return Err(Error::InvalidSetting(format!("bidder {i} out of range for {} bidders", v.n)));
    }
    mech.check_shape(v.n, m)?;
    let points = (resolution as u128).checked_pow(m as u32).unwrap_or(u128::MAX);
    if points > MAX_ORACLE_POINTS {
        return Err(Error::GridTooLarge { points, limit: MAX_ORACLE_POINTS });
    }
    let axis = |j: usize, k: usize| {
        if resolution == 1 {
            support.lo[j]
        } else {
            support.lo[j] + (support.hi[j] - support.lo[j]) * k as f64 / (resolution - 1) as f64
        }
    };
    let total = if resolution == 0 { 0 } else { points as usize };
    let mut reports = Vec::with_capacity(ORACLE_CHUNK * m);
    reports.extend_from_slice(v.bidder(i));
    let mut truthful = None;
    let mut best = f64::NEG_INFINITY;
    let mut flush = |reports: &mut Vec<f64>| -> Result<()> {
        let utils = utilities_for_reports(mech, v, i, reports)?;
        if truthful.is_none() {
            truthful = Some(utils[0]);
        }
        for u in utils {
            if u > best {
                best = u;
            }
        }
        reports.clear();
        Ok(())
    };
    for idx in 0..total {
        let mut rem = idx;
        for j in 0..m {
            reports.push(axis(j, rem % resolution));
            rem /= resolution;
        }
        if reports.len() == ORACLE_CHUNK * m {
            flush(&mut reports)?;
        }
    }
    if !reports.is_empty() {
        flush(&mut reports)?;
    }
    Ok(best - truthful.expect("truthful point evaluated"))
}
