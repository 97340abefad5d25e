use diffcore::{Real, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_profiles, streams, substream, SettingSource, SettingSpec};
use crate::error::{Error, Result};

/// Profiles of one mini-batch, all drawn from the same setting.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T: Real> {
    /// Index of the setting within its source.
    pub setting_index: usize,
    pub setting: SettingSpec,
    /// `[size, n, m]`.
    pub profiles: Tensor<T>,
}

/// A batch embedded into a larger `N x M` frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch<T: Real> {
    /// `[size, N, M]`, zero outside the real block.
    pub profiles: Tensor<T>,
    /// `[N, M]`, one on real entries and zero on padding.
    pub mask: Tensor<T>,
}

/// Draws one batch; multi-setting sources pick their setting uniformly.
pub fn make_batch<T: Real>(source: &SettingSource, size: usize, rng: &mut impl Rng) -> Batch<T> {
    let settings = source.settings();
    let setting_index = if settings.len() == 1 { 0 } else { rng.gen_range(0..settings.len()) };
    let setting = settings[setting_index].clone();
    let profiles = sample_profiles(&setting, size, rng);
    Batch { setting_index, setting, profiles }
}

/// Zero-pads `batch` into an `n x m` frame.
pub fn pad_batch<T: Real>(batch: &Batch<T>, n: usize, m: usize) -> Result<PaddedBatch<T>> {
    let (rn, rm) = (batch.setting.n, batch.setting.m);
    if rn > n || rm > m {
        return Err(Error::InvalidSetting(format!("{rn}x{rm} does not fit into a {n}x{m} frame")));
    }
    let size = batch.profiles.shape()[0];
    let src = batch.profiles.data();
    let profiles = Tensor::from_fn([size, n, m], |f| {
        let (j, i, l) = (f % m, (f / m) % n, f / (n * m));
        if i < rn && j < rm {
            src[(l * rn + i) * rm + j]
        } else {
            T::zero()
        }
    });
    let mask = Tensor::from_fn([n, m], |f| if f / m < rn && f % m < rm { T::one() } else { T::zero() });
    Ok(PaddedBatch { profiles, mask })
}

/// Deterministic training-batch stream.
///
/// Batch `k` is a pure function of the seed and `k`: with a fixed dataset of
/// `dataset_size` profiles the stream cycles through
/// `dataset_size / batch_size` batches, otherwise every iteration draws
/// fresh profiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingData {
    pub source: SettingSource,
    pub batch_size: usize,
    pub seed: u64,
    /// `None` resamples every batch.
    pub dataset_size: Option<usize>,
}

impl TrainingData {
    pub fn batches_per_epoch(&self) -> Option<usize> {
        self.dataset_size.map(|d| (d / self.batch_size).max(1))
    }

    /// Dataset batch used at `iteration`.
    pub fn batch_index(&self, iteration: usize) -> usize {
        match self.batches_per_epoch() {
            Some(count) => iteration % count,
            None => iteration,
        }
    }

    pub fn batch<T: Real>(&self, iteration: usize) -> Batch<T> {
        let key = self.batch_index(iteration) as u64;
        let mut rng = substream(self.seed, streams::TRAIN | key);
        make_batch(&self.source, self.batch_size, &mut rng)
    }
}
