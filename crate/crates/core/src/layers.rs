//! Network building blocks: dense, exchangeable and multi-head attention
//! layers, plus the fixed sinusoidal positional encoding.
//!
//! Layers hold [`ParamId`]s into the owning network's [`ParamSet`] and are
//! applied to tape variables through a [`Bound`] view.

use diffcore::{DiffError, Real, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{glorot, Bound, ParamId, ParamSet};

/// Layer-norm variance epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply<T: Real>(self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        Ok(match self {
            Activation::Tanh => tape.tanh(x)?,
            Activation::Identity => x,
        })
    }
}

fn shape_error(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Tensor(DiffError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() })
}

/// Affine map on the trailing axis followed by an activation.
#[derive(Clone, Debug)]
pub struct Dense {
    /// `[in, out]` weight.
    pub weight: ParamId,
    /// `[out]` bias.
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl Dense {
    pub fn new<T: Real>(
        params: &mut ParamSet<T>,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
    ) -> Self {
        let weight = params.add(format!("{name}.weight"), glorot(rng, &[in_dim, out_dim], in_dim, out_dim));
        let bias = params.add(format!("{name}.bias"), Tensor::zeros([out_dim]));
        Dense { weight, bias, in_dim, out_dim, activation }
    }

    /// `x: [..., in] -> [..., out]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.last() != Some(&self.in_dim) {
            return Err(shape_error("dense", &shape, &[self.in_dim, self.out_dim]));
        }
        let y = tape.matmul(x, p.var(self.weight))?;
        let y = tape.add(y, p.var(self.bias))?;
        self.activation.apply(tape, y)
    }
}

/// Permutation-equivariant layer over a `[B, n, m, K]` feature grid.
///
/// Channel `o` of the output at `(i, j)` combines the element itself, its
/// column mean, its row mean and the global mean, each through its own
/// `K x O` weight, plus a bias.
#[derive(Clone, Debug)]
pub struct Exchangeable {
    /// Element, column-mean, row-mean and global-mean weights, each `[K, O]`.
    pub weights: [ParamId; 4],
    /// `[O]` bias.
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub activation: Activation,
}

impl Exchangeable {
    pub fn new<T: Real>(
        params: &mut ParamSet<T>,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        activation: Activation,
    ) -> Self {
        // The four terms add up, so each gets a quarter of the variance.
        let mut w = |k: usize| {
            let t: Tensor<T> = glorot(rng, &[in_channels, out_channels], in_channels, out_channels);
            params.add(format!("{name}.w{k}"), t.map(|x| x * T::c(0.5)))
        };
        let weights = [w(1), w(2), w(3), w(4)];
        let bias = params.add(format!("{name}.bias"), Tensor::zeros([out_channels]));
        Exchangeable { weights, bias, in_channels, out_channels, activation }
    }

    /// `x: [B, n, m, K] -> [B, n, m, O]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[3] != self.in_channels {
            return Err(shape_error("exchangeable", &shape, &[self.in_channels, self.out_channels]));
        }
        let [w1, w2, w3, w4] = self.weights.map(|id| p.var(id));
        // Means over participants (axis 1), items (axis 2) and both.
        let col = tape.mean(x, 1, true)?;
        let row = tape.mean(x, 2, true)?;
        let all = tape.mean(col, 2, true)?;
        let t1 = tape.matmul(x, w1)?;
        let t2 = tape.matmul(col, w2)?;
        let t3 = tape.matmul(row, w3)?;
        let t4 = tape.matmul(all, w4)?;
        let y = tape.add(t1, t2)?;
        let y = tape.add(y, t3)?;
        let y = tape.add(y, t4)?;
        let y = tape.add(y, p.var(self.bias))?;
        self.activation.apply(tape, y)
    }
}

/// Multi-head softmax attention with layer normalization of its inputs.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    /// `[d, d]` query, key, value and output projections; head `h` uses
    /// columns `h*d/H .. (h+1)*d/H` of the first three.
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub dim: usize,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(
        params: &mut ParamSet<T>,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide model dimension {dim}")));
        }
        let ln_gain = params.add(format!("{name}.ln.gain"), Tensor::ones([dim]));
        let ln_bias = params.add(format!("{name}.ln.bias"), Tensor::zeros([dim]));
        let mut proj = |tag: &str| params.add(format!("{name}.{tag}"), glorot(rng, &[dim, dim], dim, dim));
        let (wq, wk, wv, wo) = (proj("wq"), proj("wk"), proj("wv"), proj("wo"));
        Ok(MultiHeadAttention { ln_gain, ln_bias, wq, wk, wv, wo, dim, heads })
    }

    fn normalize<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.layer_norm(x, LAYER_NORM_EPS)?;
        let y = tape.mul(y, p.var(self.ln_gain))?;
        Ok(tape.add(y, p.var(self.ln_bias))?)
    }

    /// `[G, S, d] -> [G*H, S, d/H]`.
    fn split_heads<T: Real>(&self, tape: &mut Tape<T>, x: Var, g: usize, s: usize) -> Result<Var> {
        let dh = self.dim / self.heads;
        let y = tape.reshape(x, &[g, s, self.heads, dh])?;
        let y = tape.permute(y, &[0, 2, 1, 3])?;
        Ok(tape.reshape(y, &[g * self.heads, s, dh])?)
    }

    /// Attention of queries `q` over keys `k` and values `v`, all shaped
    /// `[G, S, d]` with `G` independent sequences.
    pub fn attend<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, q: Var, k: Var, v: Var) -> Result<Var> {
        let qs = tape.shape(q).to_vec();
        for other in [k, v] {
            let os = tape.shape(other).to_vec();
            if os.len() != 3 || qs.len() != 3 || os[0] != qs[0] || os[2] != qs[2] {
                return Err(shape_error("attention", &qs, &os));
            }
        }
        if qs[2] != self.dim {
            return Err(shape_error("attention", &qs, &[self.dim]));
        }
        let (g, s_q, s_k) = (qs[0], qs[1], tape.shape(k)[1]);
        if tape.shape(v)[1] != s_k {
            return Err(shape_error("attention", &tape.shape(k).to_vec(), &tape.shape(v).to_vec()));
        }
        let nq = self.normalize(tape, p, q)?;
        let (nk, nv) = if k == q && v == q {
            (nq, nq)
        } else {
            (self.normalize(tape, p, k)?, self.normalize(tape, p, v)?)
        };
        let qp = tape.matmul(nq, p.var(self.wq))?;
        let kp = tape.matmul(nk, p.var(self.wk))?;
        let vp = tape.matmul(nv, p.var(self.wv))?;
        let qh = self.split_heads(tape, qp, g, s_q)?;
        let kh = self.split_heads(tape, kp, g, s_k)?;
        let vh = self.split_heads(tape, vp, g, s_k)?;
        let kt = tape.permute(kh, &[0, 2, 1])?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, 1.0 / ((self.dim / self.heads) as f64).sqrt())?;
        let weights = tape.softmax(scores, 2)?;
        let ctx = tape.matmul(weights, vh)?;
        let dh = self.dim / self.heads;
        let ctx = tape.reshape(ctx, &[g, self.heads, s_q, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[g, s_q, self.dim])?;
        Ok(tape.matmul(ctx, p.var(self.wo))?)
    }

    /// Self-attention over `[G, S, d]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        self.attend(tape, p, x, x, x)
    }
}

/// Sinusoidal table `[positions, dim]`: even columns `sin(pos / 10000^(2i/d))`,
/// odd columns the matching cosine.
pub fn positional_encoding<T: Real>(positions: usize, dim: usize) -> Result<Tensor<T>> {
    if dim % 2 != 0 {
        return Err(Error::Config(format!("positional encoding needs an even dimension, got {dim}")));
    }
    Ok(Tensor::from_fn([positions, dim], |flat| {
        let (pos, col) = (flat / dim.max(1), flat % dim.max(1));
        let freq = 10000f64.powf((col - col % 2) as f64 / dim as f64);
        let angle = pos as f64 / freq;
        T::c(if col % 2 == 0 { angle.sin() } else { angle.cos() })
    }))
}
