//! Mechanism networks mapping bid profiles to allocations and payments.
//!
//! All networks consume bids shaped `[B, n, m]` and produce an allocation
//! `[B, n+1, m]` whose last row is the dummy participant (unallocated
//! probability), payment fractions `[B, n]` in `[0, 1]` and payments
//! `p_i = p̂_i · Σ_j z_ij b_ij`, which keeps every truthful bidder
//! individually rational.

use diffcore::{Real, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::streams;
use crate::error::{Error, Result};
use crate::layers::{positional_encoding, Activation, Dense, Exchangeable, MultiHeadAttention};
use crate::params::{Bound, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    RegretNet,
    EquivariantNet,
    RegretFormer,
}

impl ArchKind {
    pub fn name(self) -> &'static str {
        match self {
            ArchKind::RegretNet => "regretnet",
            ArchKind::EquivariantNet => "equivariantnet",
            ArchKind::RegretFormer => "regretformer",
        }
    }
}

impl std::fmt::Display for ArchKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "regretnet" => Ok(ArchKind::RegretNet),
            "equivariantnet" => Ok(ArchKind::EquivariantNet),
            "regretformer" => Ok(ArchKind::RegretFormer),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

/// Where the positional encoding enters a RegretFormer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeMode {
    /// Added to the embedded feature vectors, indexed by item position and
    /// shared across participants.
    #[default]
    Features,
    /// Added to the raw bids (first sine channel, indexed by item).
    Input,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub kind: ArchKind,
    /// Bidders of the fixed input frame (RegretNet only).
    pub n: usize,
    /// Items of the fixed input frame (RegretNet only).
    pub m: usize,
    /// Accept smaller profiles by zero padding into the frame (RegretNet only).
    pub padding: bool,
    /// Fully-connected layers per stack (RegretNet) or exchangeable layers
    /// including the output head (EquivariantNet).
    pub layers: usize,
    /// Width of each RegretNet stack, EquivariantNet channels, or the
    /// RegretFormer model dimension.
    pub hidden: usize,
    /// Attention blocks (RegretFormer).
    pub blocks: usize,
    /// Attention heads (RegretFormer).
    pub heads: usize,
    pub use_pe: bool,
    pub pe_mode: PeMode,
    /// Give the EquivariantNet payment head its own trunk instead of sharing
    /// the allocation trunk.
    pub separate_stacks: bool,
}

/// Initial scale of the RegretFormer embedding weights.
const FORMER_EMBED_SCALE: f64 = 0.1;
/// Initial scale of the attention output projections and block combiners.
const FORMER_BRANCH_SCALE: f64 = 0.1;

/// Column of the architecture table used for a setting label.
fn preset_column(label: &str) -> usize {
    match label {
        "1x2" | "asym1x2" => 0,
        "2x2" => 1,
        "2x3" => 2,
        "2x5" => 3,
        "3x10" => 4,
        _ => 5,
    }
}

impl ArchConfig {
    /// Reference hyperparameters for the setting labelled `label` with input
    /// frame `(n, m)`; unknown labels use the multi-setting column. `desk`
    /// halves every hidden dimension.
    pub fn preset(kind: ArchKind, label: &str, n: usize, m: usize, desk: bool) -> Self {
        const FC_LAYERS: [usize; 6] = [3, 3, 3, 6, 6, 6];
        const EXCH_LAYERS: [usize; 6] = [3, 3, 5, 6, 6, 6];
        const ATTN_BLOCKS: [usize; 6] = [1, 1, 1, 2, 2, 2];
        const ATTN_HEADS: [usize; 6] = [2, 2, 2, 4, 4, 4];
        const FORMER_DIM: [usize; 6] = [32, 64, 64, 128, 128, 128];
        let c = preset_column(label);
        let shrink = |d: usize| if desk { d / 2 } else { d };
        let (layers, hidden) = match kind {
            // The reference width of 200 counts both stacks together.
            ArchKind::RegretNet => (FC_LAYERS[c], shrink(100)),
            ArchKind::EquivariantNet => (EXCH_LAYERS[c], shrink(32)),
            ArchKind::RegretFormer => (1, shrink(FORMER_DIM[c])),
        };
        ArchConfig {
            kind,
            n,
            m,
            padding: label.starts_with("multi"),
            layers,
            hidden,
            blocks: ATTN_BLOCKS[c],
            heads: ATTN_HEADS[c],
            use_pe: false,
            pe_mode: PeMode::Features,
            separate_stacks: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.hidden == 0 {
            return bad("hidden dimension must be positive".into());
        }
        match self.kind {
            ArchKind::RegretNet => {
                if self.n == 0 || self.m == 0 {
                    return bad("RegretNet needs a fixed n x m frame".into());
                }
                if self.layers < 2 {
                    return bad("RegretNet needs at least 2 fully-connected layers".into());
                }
            }
            ArchKind::EquivariantNet => {
                if self.layers < 2 {
                    return bad("EquivariantNet needs at least 2 exchangeable layers".into());
                }
            }
            ArchKind::RegretFormer => {
                if self.heads == 0 || self.hidden % self.heads != 0 {
                    return bad(format!("{} heads do not divide model dimension {}", self.heads, self.hidden));
                }
                if self.use_pe && self.pe_mode == PeMode::Features && self.hidden % 2 != 0 {
                    return bad("positional encoding needs an even model dimension".into());
                }
            }
        }
        Ok(())
    }
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `[B, n+1, m]`, columns sum to one; the last row is the dummy.
    pub allocation: Var,
    /// `[B, n]` in `[0, 1]`.
    pub payment_fraction: Var,
    /// `[B, n]`, `p̂_i Σ_j z_ij b_ij`.
    pub payment: Var,
    /// Pre-softmax allocation scores `[B, n+1, m]`, when the network has them.
    pub logits: Option<Var>,
}

/// Plain-tensor copy of a [`ForwardOutput`].
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome<T: Real> {
    pub allocation: Tensor<T>,
    pub payment_fraction: Tensor<T>,
    pub payment: Tensor<T>,
}

impl ForwardOutput {
    pub fn read<T: Real>(&self, tape: &Tape<T>) -> Outcome<T> {
        Outcome {
            allocation: tape.value(self.allocation).clone(),
            payment_fraction: tape.value(self.payment_fraction).clone(),
            payment: tape.value(self.payment).clone(),
        }
    }
}

/// Anything that maps bid profiles to an auction outcome on a tape.
pub trait Mechanism<T: Real>: Sync {
    fn name(&self) -> String;

    /// Errors when profiles of `n` bidders and `m` items are not accepted.
    fn check_shape(&self, n: usize, m: usize) -> Result<()>;

    /// Places the mechanism's parameters on `tape`.
    fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bound;

    /// `bids: [B, n, m]`.
    fn forward(&self, tape: &mut Tape<T>, params: &Bound, bids: Var) -> Result<ForwardOutput>;

    /// Runs the mechanism on concrete profiles without recording gradients.
    fn outcome(&self, profiles: &Tensor<T>) -> Result<Outcome<T>> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let bids = tape.constant(profiles.clone());
        let out = self.forward(&mut tape, &params, bids)?;
        Ok(out.read(&tape))
    }
}

/// `p_i = p̂_i Σ_j z_ij b_ij`; a trailing dummy row in `allocation` is ignored.
pub fn compute_payments<T: Real>(tape: &mut Tape<T>, allocation: Var, fraction: Var, bids: Var) -> Result<Var> {
    let n = tape.shape(bids)[1];
    let real = if tape.shape(allocation)[1] == n { allocation } else { tape.narrow(allocation, 1, 0, n)? };
    let value = tape.mul(real, bids)?;
    let value = tape.sum(value, 2, false)?;
    Ok(tape.mul(fraction, value)?)
}

fn profile_shape<T: Real>(tape: &Tape<T>, bids: Var) -> Result<(usize, usize, usize)> {
    match *tape.shape(bids) {
        [b, n, m] => Ok((b, n, m)),
        ref other => Err(Error::Tensor(diffcore::DiffError::InvalidArgument {
            op: "mechanism forward",
            reason: format!("bids must be [batch, n, m], got {other:?}"),
        })),
    }
}

#[derive(Clone, Debug)]
struct RegretNetBody {
    alloc: Vec<Dense>,
    pay: Vec<Dense>,
}

#[derive(Clone, Debug)]
struct EquivariantBody {
    trunk: Vec<Exchangeable>,
    pay_trunk: Option<Vec<Exchangeable>>,
    alloc_head: Exchangeable,
    pay_head: Exchangeable,
}

#[derive(Clone, Debug)]
struct FormerBlock {
    item_attn: MultiHeadAttention,
    part_attn: MultiHeadAttention,
    combine: Dense,
}

#[derive(Clone, Debug)]
struct FormerBody {
    embed: Exchangeable,
    blocks: Vec<FormerBlock>,
}

#[derive(Clone, Debug)]
enum Body {
    RegretNet(RegretNetBody),
    Equivariant(EquivariantBody),
    Former(FormerBody),
}

/// A trainable mechanism network and its parameters.
#[derive(Clone, Debug)]
pub struct MechanismNetwork<T: Real> {
    config: ArchConfig,
    params: ParamSet<T>,
    body: Body,
}

fn fc_stack<T: Real>(
    params: &mut ParamSet<T>,
    rng: &mut ChaCha20Rng,
    name: &str,
    layers: usize,
    input: usize,
    hidden: usize,
    output: usize,
) -> Vec<Dense> {
    (0..layers)
        .map(|l| {
            let in_dim = if l == 0 { input } else { hidden };
            let (out_dim, act) = if l + 1 == layers { (output, Activation::Identity) } else { (hidden, Activation::Tanh) };
            Dense::new(params, rng, &format!("{name}.{l}"), in_dim, out_dim, act)
        })
        .collect()
}

fn exch_trunk<T: Real>(
    params: &mut ParamSet<T>,
    rng: &mut ChaCha20Rng,
    name: &str,
    layers: usize,
    hidden: usize,
) -> Vec<Exchangeable> {
    (0..layers)
        .map(|l| {
            let in_ch = if l == 0 { 1 } else { hidden };
            Exchangeable::new(params, rng, &format!("{name}.{l}"), in_ch, hidden, Activation::Tanh)
        })
        .collect()
}

impl<T: Real> MechanismNetwork<T> {
    /// Builds a network with parameters drawn deterministically from `seed`.
    pub fn new(config: ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(streams::INIT);
        let mut params = ParamSet::new();
        let h = config.hidden;
        let body = match config.kind {
            ArchKind::RegretNet => {
                let input = config.n * config.m;
                let alloc =
                    fc_stack(&mut params, &mut rng, "alloc", config.layers, input, h, (config.n + 1) * config.m);
                let pay = fc_stack(&mut params, &mut rng, "pay", config.layers, input, h, config.n);
                Body::RegretNet(RegretNetBody { alloc, pay })
            }
            ArchKind::EquivariantNet => {
                let depth = config.layers - 1;
                let trunk = exch_trunk(&mut params, &mut rng, "trunk", depth, h);
                let pay_trunk = config
                    .separate_stacks
                    .then(|| exch_trunk(&mut params, &mut rng, "pay_trunk", depth, h));
                let alloc_head = Exchangeable::new(&mut params, &mut rng, "alloc_head", h, 1, Activation::Identity);
                let pay_head = Exchangeable::new(&mut params, &mut rng, "pay_head", h, 1, Activation::Identity);
                Body::Equivariant(EquivariantBody { trunk, pay_trunk, alloc_head, pay_head })
            }
            ArchKind::RegretFormer => {
                let embed = Exchangeable::new(&mut params, &mut rng, "embed", 1, h, Activation::Tanh);
                let blocks = (0..config.blocks)
                    .map(|b| {
                        Ok(FormerBlock {
                            item_attn: MultiHeadAttention::new(
                                &mut params,
                                &mut rng,
                                &format!("block{b}.item"),
                                h,
                                config.heads,
                            )?,
                            part_attn: MultiHeadAttention::new(
                                &mut params,
                                &mut rng,
                                &format!("block{b}.part"),
                                h,
                                config.heads,
                            )?,
                            combine: Dense::new(
                                &mut params,
                                &mut rng,
                                &format!("block{b}.fc"),
                                2 * h,
                                h,
                                Activation::Tanh,
                            ),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                // The item and participant embeddings meet in a dot product,
                // so default-scale weights start with saturated allocations.
                // Shrinking the embedding and the residual branches keeps the
                // initial logits of order one.
                let names: Vec<String> = params.names().to_vec();
                for name in names {
                    let factor = if name.starts_with("embed.w") {
                        FORMER_EMBED_SCALE
                    } else if name.ends_with(".wo") || name.ends_with(".fc.weight") {
                        FORMER_BRANCH_SCALE
                    } else {
                        continue;
                    };
                    let scaled = params.by_name(&name).expect("parameter just created").map(|x| x * T::c(factor));
                    params.replace(&name, scaled).map_err(Error::Config)?;
                }
                Body::Former(FormerBody { embed, blocks })
            }
        };
        Ok(MechanismNetwork { config, params, body })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn kind(&self) -> ArchKind {
        self.config.kind
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    fn regretnet_forward(&self, body: &RegretNetBody, tape: &mut Tape<T>, p: &Bound, bids: Var) -> Result<ForwardOutput> {
        let (b, n, m) = profile_shape(tape, bids)?;
        let (fn_, fm) = (self.config.n, self.config.m);
        let padded = (n, m) != (fn_, fm);
        let mut x = bids;
        if m < fm {
            let zeros = tape.constant(Tensor::zeros([b, n, fm - m]));
            x = tape.concat(&[x, zeros], 2)?;
        }
        if n < fn_ {
            let zeros = tape.constant(Tensor::zeros([b, fn_ - n, fm]));
            x = tape.concat(&[x, zeros], 1)?;
        }
        let flat = tape.reshape(x, &[b, fn_ * fm])?;
        let mut a = flat;
        for layer in &body.alloc {
            a = layer.forward(tape, p, a)?;
        }
        let logits = tape.reshape(a, &[b, fn_ + 1, fm])?;
        let mut q = flat;
        for layer in &body.pay {
            q = layer.forward(tape, p, q)?;
        }
        let fraction = tape.sigmoid(q)?;
        let full = tape.softmax(logits, 1)?;
        let (allocation, fraction, logits) = if padded {
            let real = tape.narrow(full, 1, 0, n)?;
            let real = tape.narrow(real, 2, 0, m)?;
            let taken = tape.sum(real, 1, true)?;
            let taken = tape.neg(taken)?;
            let dummy = tape.add_scalar(taken, 1.0)?;
            (tape.concat(&[real, dummy], 1)?, tape.narrow(fraction, 1, 0, n)?, None)
        } else {
            (full, fraction, Some(logits))
        };
        let payment = compute_payments(tape, allocation, fraction, bids)?;
        Ok(ForwardOutput { allocation, payment_fraction: fraction, payment, logits })
    }

    fn equivariant_forward(
        &self,
        body: &EquivariantBody,
        tape: &mut Tape<T>,
        p: &Bound,
        bids: Var,
    ) -> Result<ForwardOutput> {
        let (b, n, m) = profile_shape(tape, bids)?;
        let x = tape.reshape(bids, &[b, n, m, 1])?;
        let run = |tape: &mut Tape<T>, trunk: &[Exchangeable]| -> Result<Var> {
            let mut h = x;
            for layer in trunk {
                h = layer.forward(tape, p, h)?;
            }
            Ok(h)
        };
        let h = run(tape, &body.trunk)?;
        let hp = match &body.pay_trunk {
            Some(trunk) => run(tape, trunk)?,
            None => h,
        };
        let a = body.alloc_head.forward(tape, p, h)?;
        let a = tape.reshape(a, &[b, n, m])?;
        let dummy = tape.constant(Tensor::zeros([b, 1, m]));
        let logits = tape.concat(&[a, dummy], 1)?;
        let allocation = tape.softmax(logits, 1)?;
        let q = body.pay_head.forward(tape, p, hp)?;
        let q = tape.reshape(q, &[b, n, m])?;
        let q = tape.mean(q, 2, false)?;
        let fraction = tape.sigmoid(q)?;
        let payment = compute_payments(tape, allocation, fraction, bids)?;
        Ok(ForwardOutput { allocation, payment_fraction: fraction, payment, logits: Some(logits) })
    }

    fn former_forward(&self, body: &FormerBody, tape: &mut Tape<T>, p: &Bound, bids: Var) -> Result<ForwardOutput> {
        let (b, n, m) = profile_shape(tape, bids)?;
        let d = self.config.hidden;
        let mut x = bids;
        if self.config.use_pe && self.config.pe_mode == PeMode::Input {
            let table = positional_encoding::<T>(m, 2)?;
            let sines = Tensor::from_fn([m], |j| table.at(&[j, 0]));
            let pe = tape.constant(sines);
            x = tape.add(x, pe)?;
        }
        let x = tape.reshape(x, &[b, n, m, 1])?;
        let mut h = body.embed.forward(tape, p, x)?;
        if self.config.use_pe && self.config.pe_mode == PeMode::Features {
            let pe = tape.constant(positional_encoding(m, d)?);
            h = tape.add(h, pe)?;
        }
        for block in &body.blocks {
            // Attention across the items of each participant.
            let seq = tape.reshape(h, &[b * n, m, d])?;
            let att = block.item_attn.forward(tape, p, seq)?;
            let att = tape.reshape(att, &[b, n, m, d])?;
            let by_item = tape.add(att, h)?;
            // Attention across the participants of each item.
            let t = tape.permute(h, &[0, 2, 1, 3])?;
            let seq = tape.reshape(t, &[b * m, n, d])?;
            let att = block.part_attn.forward(tape, p, seq)?;
            let att = tape.reshape(att, &[b, m, n, d])?;
            let att = tape.permute(att, &[0, 2, 1, 3])?;
            let by_part = tape.add(att, h)?;
            let both = tape.concat(&[by_item, by_part], 3)?;
            let mixed = block.combine.forward(tape, p, both)?;
            h = tape.add(mixed, h)?;
        }
        let participants = tape.mean(h, 2, false)?; // [B, n, d]
        let items = tape.mean(h, 1, false)?; // [B, m, d]
        let items_t = tape.transpose(items)?;
        let scores = tape.matmul(participants, items_t)?; // [B, n, m]
        let total = tape.sum(scores, 1, true)?;
        let dummy = tape.neg(total)?;
        let logits = tape.concat(&[scores, dummy], 1)?;
        let allocation = tape.softmax(logits, 1)?;
        let q = tape.mean(participants, 2, false)?;
        let fraction = tape.sigmoid(q)?;
        let payment = compute_payments(tape, allocation, fraction, bids)?;
        Ok(ForwardOutput { allocation, payment_fraction: fraction, payment, logits: Some(logits) })
    }
}

impl<T: Real> Mechanism<T> for MechanismNetwork<T> {
    fn name(&self) -> String {
        self.config.kind.name().to_string()
    }

    fn check_shape(&self, n: usize, m: usize) -> Result<()> {
        if n == 0 || m == 0 {
            return Err(Error::InvalidSetting(format!("empty profile shape {n}x{m}")));
        }
        if self.config.kind == ArchKind::RegretNet {
            let (fn_, fm) = (self.config.n, self.config.m);
            let fits = if self.config.padding { n <= fn_ && m <= fm } else { n == fn_ && m == fm };
            if !fits {
                return Err(Error::FixedShape { arch: "regretnet", expected_n: fn_, expected_m: fm, n, m });
            }
        }
        Ok(())
    }

    fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bound {
        self.params.bind(tape, requires_grad)
    }

    fn forward(&self, tape: &mut Tape<T>, params: &Bound, bids: Var) -> Result<ForwardOutput> {
        let (_, n, m) = profile_shape(tape, bids)?;
        self.check_shape(n, m)?;
        match &self.body {
            Body::RegretNet(body) => self.regretnet_forward(body, tape, params, bids),
            Body::Equivariant(body) => self.equivariant_forward(body, tape, params, bids),
            Body::Former(body) => self.former_forward(body, tape, params, bids),
        }
    }
}
