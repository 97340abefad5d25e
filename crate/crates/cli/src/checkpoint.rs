//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | field | encoding |
//! |---|---|
//! | magic | the 8 bytes `MECHCKPT` |
//! | version | `u32`, currently 1 |
//! | float width | `u8`, 4 or 8 bytes per value |
//! | metadata | `u64` length, then UTF-8 JSON |
//! | tensors | `u32` count, then per tensor: `u32` name length, name, `u32` rank, `u64` per dimension, values |
//! | optimizer | `u8` flag; when 1: `f64` lr, beta1, beta2, eps, `u64` step, `u32` count, then per slot a `u64` length and the first and second moments |
//! | checksum | SHA-256 of every preceding byte |
//!
//! The metadata holds the architecture, the setting source, and for training
//! checkpoints the train configuration, multiplier state, iteration counter,
//! validation history, elapsed time and the position in the batch stream.

use std::path::Path;

use diffcore::{Precision, Real, Tensor};
use mechnet::architectures::{ArchConfig, MechanismNetwork};
use mechnet::data::SettingSource;
use mechnet::training::{Adam, ObjectiveState, TrainConfig, Trainer, ValidationRow};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::CliError;

pub const MAGIC: &[u8; 8] = b"MECHCKPT";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
/// Offset of the float-width byte.
const WIDTH_OFFSET: usize = 12;

#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("checkpoint stores {found}-byte floats, expected {expected}")]
    Precision { found: u8, expected: u8 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// Optimizer and multiplier state needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState<T: Real> {
    pub config: TrainConfig,
    pub state: ObjectiveState,
    pub optimizer: Adam<T>,
    /// Completed outer iterations.
    pub iteration: usize,
    pub history: Vec<ValidationRow>,
    pub elapsed_ms: u64,
}

/// A network, the profiles it was trained on, and optionally its training
/// state.
#[derive(Clone, Debug)]
pub struct Checkpoint<T: Real> {
    pub net: MechanismNetwork<T>,
    pub source: SettingSource,
    pub training: Option<TrainingState<T>>,
}

/// A checkpoint of either precision.
#[derive(Clone, Debug)]
pub enum AnyCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

impl AnyCheckpoint {
    pub fn precision(&self) -> Precision {
        match self {
            AnyCheckpoint::F32(_) => Precision::F32,
            AnyCheckpoint::F64(_) => Precision::F64,
        }
    }

    pub fn source(&self) -> &SettingSource {
        match self {
            AnyCheckpoint::F32(c) => &c.source,
            AnyCheckpoint::F64(c) => &c.source,
        }
    }

    pub fn arch(&self) -> &ArchConfig {
        match self {
            AnyCheckpoint::F32(c) => c.net.config(),
            AnyCheckpoint::F64(c) => c.net.config(),
        }
    }
}

/// Validation row with non-finite values stored as JSON `null`.
#[derive(Serialize, Deserialize)]
struct HistoryRecord {
    iteration: usize,
    revenue: Option<f64>,
    regret_mean: Option<f64>,
    ratio: Option<f64>,
    gamma: Option<f64>,
    r_max: Option<f64>,
    wall_ms: u64,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

impl From<&ValidationRow> for HistoryRecord {
    fn from(r: &ValidationRow) -> Self {
        HistoryRecord {
            iteration: r.iteration,
            revenue: finite(r.revenue),
            regret_mean: finite(r.regret_mean),
            ratio: finite(r.ratio),
            gamma: finite(r.gamma),
            r_max: finite(r.r_max),
            wall_ms: r.wall_ms,
        }
    }
}

impl From<HistoryRecord> for ValidationRow {
    fn from(r: HistoryRecord) -> Self {
        let nan = |x: Option<f64>| x.unwrap_or(f64::NAN);
        ValidationRow {
            iteration: r.iteration,
            revenue: nan(r.revenue),
            regret_mean: nan(r.regret_mean),
            ratio: nan(r.ratio),
            gamma: nan(r.gamma),
            r_max: nan(r.r_max),
            wall_ms: r.wall_ms,
        }
    }
}

/// Where the deterministic batch stream continues.
#[derive(Serialize, Deserialize)]
struct RngState {
    seed: u64,
    next_iteration: usize,
    next_batch: usize,
}

#[derive(Serialize, Deserialize)]
struct TrainingMeta {
    config: TrainConfig,
    state: ObjectiveState,
    iteration: usize,
    history: Vec<HistoryRecord>,
    elapsed_ms: u64,
    rng: RngState,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    architecture: ArchConfig,
    source: SettingSource,
    parameter_count: usize,
    training: Option<TrainingMeta>,
}

/// Byte cursor whose reads fail with [`CheckpointError::Truncated`].
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(len).ok_or(CheckpointError::Truncated)?;
        let out = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize, CheckpointError> {
        usize::try_from(self.u64()?).map_err(|_| CheckpointError::Truncated)
    }

    fn values<T: Real>(&mut self, count: usize) -> Result<Vec<T>, CheckpointError> {
        let width = T::PRECISION.byte_width();
        let raw = self.take(count.checked_mul(width).ok_or(CheckpointError::Truncated)?)?;
        Ok(raw.chunks_exact(width).map(T::read_le).collect())
    }
}

fn malformed(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Malformed(msg.into())
}

fn put_values<T: Real>(out: &mut Vec<u8>, values: &[T]) {
    for &x in values {
        x.write_le(out);
    }
}

impl<T: Real> Checkpoint<T> {
    /// Snapshot of a trainer. Elapsed time is stored only when the run
    /// records wall time, so deterministic runs produce identical files.
    pub fn from_trainer(trainer: &Trainer<T>) -> Self {
        let elapsed_ms = if trainer.config.record_wall_time { trainer.total_elapsed_ms() } else { 0 };
        Checkpoint {
            net: trainer.net.clone(),
            source: trainer.data.source.clone(),
            training: Some(TrainingState {
                config: trainer.config.clone(),
                state: trainer.state.clone(),
                optimizer: trainer.optimizer.clone(),
                iteration: trainer.iteration,
                history: trainer.history.clone(),
                elapsed_ms,
            }),
        }
    }

    /// Rebuilds a trainer positioned after the saved iteration.
    pub fn into_trainer(self) -> Result<Trainer<T>, CliError> {
        let t = self
            .training
            .ok_or_else(|| CliError::Config("checkpoint holds no training state".into()))?;
        Ok(Trainer::from_parts(
            self.net,
            self.source,
            t.config,
            t.state,
            t.optimizer,
            t.iteration,
            t.history,
            t.elapsed_ms,
        )?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let params = self.net.params();
        let training = self.training.as_ref().map(|t| TrainingMeta {
            config: t.config.clone(),
            state: t.state.clone(),
            iteration: t.iteration,
            history: t.history.iter().map(HistoryRecord::from).collect(),
            elapsed_ms: t.elapsed_ms,
            rng: RngState {
                seed: t.config.seed,
                next_iteration: t.iteration,
                next_batch: match t.config.dataset_size {
                    Some(size) => t.iteration % (size / t.config.batch_size).max(1),
                    None => t.iteration,
                },
            },
        });
        let meta = Metadata {
            architecture: self.net.config().clone(),
            source: self.source.clone(),
            parameter_count: params.count(),
            training,
        };
        let meta = serde_json::to_vec(&meta).expect("checkpoint metadata serializes");

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::PRECISION.byte_width() as u8);
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);

        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (name, tensor) in params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(tensor.ndim() as u32).to_le_bytes());
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_values(&mut out, tensor.data());
        }

        match &self.training {
            None => out.push(0),
            Some(t) => {
                let adam = &t.optimizer;
                out.push(1);
                for x in [adam.lr, adam.beta1, adam.beta2, adam.eps] {
                    out.extend_from_slice(&x.to_le_bytes());
                }
                out.extend_from_slice(&adam.step.to_le_bytes());
                out.extend_from_slice(&(adam.first.len() as u32).to_le_bytes());
                for (m, v) in adam.first.iter().zip(&adam.second) {
                    out.extend_from_slice(&(m.len() as u64).to_le_bytes());
                    put_values(&mut out, m);
                    put_values(&mut out, v);
                }
            }
        }

        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let width = check_header(bytes)?;
        let expected = T::PRECISION.byte_width() as u8;
        if width != expected {
            return Err(CheckpointError::Precision { found: width, expected });
        }
        let mut r = Reader { bytes, pos: WIDTH_OFFSET + 1 };

        let meta_len = r.len()?;
        let meta: Metadata = serde_json::from_slice(r.take(meta_len)?).map_err(|e| malformed(e.to_string()))?;

        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| malformed("tensor name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>, _>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(CheckpointError::Truncated)?;
            let data = r.values::<T>(numel)?;
            let tensor = Tensor::new(shape, data).map_err(|e| malformed(e.to_string()))?;
            tensors.push((name.to_string(), tensor));
        }

        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
                let step = r.u64()?;
                let slots = r.u32()? as usize;
                let (mut first, mut second) = (Vec::new(), Vec::new());
                for _ in 0..slots {
                    let len = r.len()?;
                    first.push(r.values::<T>(len)?);
                    second.push(r.values::<T>(len)?);
                }
                Some(Adam { lr, beta1, beta2, eps, step, first, second })
            }
            flag => return Err(malformed(format!("optimizer flag {flag}"))),
        };

        let body_end = r.pos;
        let trailer = r.take(DIGEST_LEN)?;
        if r.pos != bytes.len() {
            return Err(malformed("trailing bytes after the checksum"));
        }
        if Sha256::digest(&bytes[..body_end]).as_slice() != trailer {
            return Err(CheckpointError::Checksum);
        }

        let mut net = MechanismNetwork::<T>::new(meta.architecture, 0).map_err(|e| malformed(e.to_string()))?;
        if tensors.len() != net.params().len() || meta.parameter_count != net.params().count() {
            return Err(malformed("tensor table does not match the architecture"));
        }
        for (name, tensor) in tensors {
            net.params_mut().replace(&name, tensor).map_err(malformed)?;
        }

        let training = match (meta.training, optimizer) {
            (None, None) => None,
            (Some(t), Some(optimizer)) => {
                let sizes: Vec<usize> = net.params().tensors().iter().map(Tensor::len).collect();
                let fits = |moments: &[Vec<T>]| {
                    moments.len() == sizes.len() && moments.iter().zip(&sizes).all(|(m, &s)| m.len() == s)
                };
                if !fits(&optimizer.first) || !fits(&optimizer.second) {
                    return Err(malformed("optimizer state does not match the parameters"));
                }
                Some(TrainingState {
                    config: t.config,
                    state: t.state,
                    optimizer,
                    iteration: t.iteration,
                    history: t.history.into_iter().map(ValidationRow::from).collect(),
                    elapsed_ms: t.elapsed_ms,
                })
            }
            _ => return Err(malformed("training metadata and optimizer state disagree")),
        };
        Ok(Checkpoint { net, source: meta.source, training })
    }

    /// Writes through a temporary file so an interrupted save never leaves a
    /// partial checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| CliError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
    }
}

/// Validates magic and version; returns the float width.
fn check_header(bytes: &[u8]) -> Result<u8, CheckpointError> {
    if bytes.len() < MAGIC.len() {
        return Err(if MAGIC.starts_with(bytes) { CheckpointError::Truncated } else { CheckpointError::BadMagic });
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader { bytes, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    r.u8()
}

/// Decodes a checkpoint of whichever precision it was saved in.
pub fn from_bytes_any(bytes: &[u8]) -> Result<AnyCheckpoint, CheckpointError> {
    match check_header(bytes)? {
        4 => Checkpoint::from_bytes(bytes).map(AnyCheckpoint::F32),
        8 => Checkpoint::from_bytes(bytes).map(AnyCheckpoint::F64),
        other => Err(malformed(format!("unsupported float width {other}"))),
    }
}

pub fn load(path: &Path) -> Result<AnyCheckpoint, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    from_bytes_any(&bytes).map_err(|source| CliError::Checkpoint { path: path.to_path_buf(), source })
}
