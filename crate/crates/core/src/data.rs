//! Valuation samplers, auction settings and seeded random streams.
//!
//! Every stream is a ChaCha20 generator seeded through
//! `ChaCha20Rng::seed_from_u64`, so draws are identical across runs and
//! platforms. Sub-streams select a distinct ChaCha stream id, which keeps
//! them collision-free by construction.

use std::fmt;

use diffcore::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Independent additive valuations, item `j` uniform on `[lo_j, hi_j]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettingSpec {
    pub n: usize,
    pub m: usize,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub label: String,
}

impl SettingSpec {
    /// `n` bidders, `m` items, every valuation on `U[0, 1]`.
    pub fn uniform(n: usize, m: usize) -> Self {
        SettingSpec { n, m, lo: vec![0.0; m], hi: vec![1.0; m], label: format!("{n}x{m}") }
    }

    pub fn with_ranges(n: usize, m: usize, lo: Vec<f64>, hi: Vec<f64>, label: impl Into<String>) -> Result<Self> {
        let spec = SettingSpec { n, m, lo, hi, label: label.into() };
        spec.validate()?;
        Ok(spec)
    }

    /// Single bidder, two items with `v1 ~ U[4, 16]` and `v2 ~ U[4, 7]`.
    pub fn asymmetric_1x2() -> Self {
        SettingSpec { n: 1, m: 2, lo: vec![4.0, 4.0], hi: vec![16.0, 7.0], label: "asym1x2".into() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return Err(Error::InvalidSetting(format!("{}: need n >= 1 and m >= 1", self.label)));
        }
        if self.lo.len() != self.m || self.hi.len() != self.m {
            return Err(Error::InvalidSetting(format!("{}: need one range per item", self.label)));
        }
        for (j, (lo, hi)) in self.lo.iter().zip(&self.hi).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(Error::InvalidSetting(format!("{}: item {j} range [{lo}, {hi}] is empty", self.label)));
            }
        }
        Ok(())
    }

    pub fn is_unit_uniform(&self) -> bool {
        self.lo.iter().all(|&x| x == 0.0) && self.hi.iter().all(|&x| x == 1.0)
    }

    pub fn support(&self) -> Support {
        Support { lo: self.lo.clone(), hi: self.hi.clone() }
    }
}

impl fmt::Display for SettingSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label)
    }
}

impl std::str::FromStr for SettingSpec {
    type Err = Error;

    /// Parses `"NxM"` into a unit-uniform setting.
    fn from_str(s: &str) -> Result<Self> {
        if s == "asym1x2" {
            return Ok(Self::asymmetric_1x2());
        }
        let bad = || Error::InvalidSetting(format!("`{s}` is not of the form NxM"));
        let (n, m) = s.split_once('x').ok_or_else(bad)?;
        let n: usize = n.trim().parse().map_err(|_| bad())?;
        let m: usize = m.trim().parse().map_err(|_| bad())?;
        let spec = Self::uniform(n, m);
        spec.validate()?;
        Ok(spec)
    }
}

/// Per-item box of admissible reports.
#[derive(Clone, Debug, PartialEq)]
pub struct Support {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

/// Uniform mixture over constant-sized settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiSettingSpec {
    pub settings: Vec<SettingSpec>,
    pub label: String,
}

const STANDARD_MULTI: [(usize, usize); 10] =
    [(2, 3), (2, 4), (2, 5), (2, 6), (2, 7), (3, 3), (3, 4), (3, 5), (3, 6), (3, 7)];
const MULTI_TRAIN: [(usize, usize); 5] = [(2, 3), (2, 5), (2, 7), (3, 4), (3, 6)];
const MULTI_TEST: [(usize, usize); 5] = [(2, 4), (2, 6), (3, 3), (3, 5), (3, 7)];

impl MultiSettingSpec {
    pub fn new(settings: Vec<SettingSpec>, label: impl Into<String>) -> Result<Self> {
        if settings.is_empty() {
            return Err(Error::InvalidSetting("multi-setting needs at least one constituent".into()));
        }
        for s in &settings {
            s.validate()?;
        }
        Ok(MultiSettingSpec { settings, label: label.into() })
    }

    fn from_shapes(shapes: &[(usize, usize)], label: &str) -> Self {
        let settings = shapes.iter().map(|&(n, m)| SettingSpec::uniform(n, m)).collect();
        MultiSettingSpec { settings, label: label.into() }
    }

    /// `{2x3, ..., 2x7, 3x3, ..., 3x7}`.
    pub fn standard() -> Self {
        Self::from_shapes(&STANDARD_MULTI, "multi")
    }

    /// Training half of the out-of-setting split.
    pub fn train_split() -> Self {
        Self::from_shapes(&MULTI_TRAIN, "multi-train")
    }

    /// Held-out half of the out-of-setting split.
    pub fn test_split() -> Self {
        Self::from_shapes(&MULTI_TEST, "multi-test")
    }

    /// Largest `(n, m)` over the constituents, the padding frame for
    /// fixed-size networks.
    pub fn max_shape(&self) -> (usize, usize) {
        self.settings.iter().fold((0, 0), |(n, m), s| (n.max(s.n), m.max(s.m)))
    }
}

/// What a training run draws its profiles from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SettingSource {
    Single(SettingSpec),
    Multi(MultiSettingSpec),
}

impl SettingSource {
    /// Named presets: `NxM`, `asym1x2`, `multi`, `multi-train`, `multi-test`.
    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "multi" => SettingSource::Multi(MultiSettingSpec::standard()),
            "multi-train" => SettingSource::Multi(MultiSettingSpec::train_split()),
            "multi-test" => SettingSource::Multi(MultiSettingSpec::test_split()),
            other => SettingSource::Single(other.parse()?),
        })
    }

    pub fn settings(&self) -> &[SettingSpec] {
        match self {
            SettingSource::Single(s) => std::slice::from_ref(s),
            SettingSource::Multi(m) => &m.settings,
        }
    }

    pub fn label(&self) -> &str {
        match self {
            SettingSource::Single(s) => &s.label,
            SettingSource::Multi(m) => &m.label,
        }
    }

    pub fn max_shape(&self) -> (usize, usize) {
        match self {
            SettingSource::Single(s) => (s.n, s.m),
            SettingSource::Multi(m) => m.max_shape(),
        }
    }
}

/// Draws `count` i.i.d. profiles as a `[count, n, m]` tensor.
///
/// Values are generated in bidder-major, item-minor order.
pub fn sample_profiles<T: Real>(spec: &SettingSpec, count: usize, rng: &mut impl Rng) -> Tensor<T> {
    let (n, m) = (spec.n, spec.m);
    let mut data = Vec::with_capacity(count * n * m);
    for _ in 0..count * n {
        for j in 0..m {
            let u: f64 = rng.gen();
            data.push(T::c(spec.lo[j] + (spec.hi[j] - spec.lo[j]) * u));
        }
    }
    Tensor::new(vec![count, n, m], data).expect("profile tensor shape")
}

/// Deterministic generator for `seed`.
pub fn seeded_stream(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Independent stream `key` derived from `seed`.
pub fn substream(seed: u64, key: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(key);
    rng
}

/// Stream-id namespaces, so that e.g. batch 3 of training never shares a
/// stream with validation chunk 3.
pub mod streams {
    pub const INIT: u64 = 1 << 56;
    pub const TRAIN: u64 = 2 << 56;
    pub const VALID: u64 = 3 << 56;
    pub const EVAL: u64 = 4 << 56;
    pub const DISTILL: u64 = 5 << 56;
    pub const MONTE_CARLO: u64 = 6 << 56;

    /// Stream id for the misreport block of `(sample, bidder)`.
    pub fn misreport(sample: u64, bidder: u64) -> u64 {
        (7 << 56) | (sample << 8) | bidder
    }
}
