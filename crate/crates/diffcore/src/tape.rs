//! Wengert tape: every primitive application appends a node holding its
//! result and the operands needed by its backward rule.

use crate::error::{DiffError, Result};
use crate::kernels::{
    axis_layout, broadcast_shape, broadcast_strides, for_each_offset2, inverse_axes, permute,
    permuted_shape,
};
use crate::real::{gemm, MatRef, Real};
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// Primitive catalog, for callers that dispatch on an op id.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Unary(Unary),
    Binary(Binary),
    Scale(f64),
    AddScalar(f64),
    Clamp(f64, f64),
    MatMul,
    Transpose,
    Permute(Vec<usize>),
    Reshape(Vec<usize>),
    Concat { axis: usize },
    Narrow { axis: usize, start: usize, len: usize },
    Sum { axis: usize, keepdim: bool },
    Mean { axis: usize, keepdim: bool },
    SumAll,
    Softmax { axis: usize },
    LayerNorm { eps: f64 },
    MaxScalars,
}

enum Op<T> {
    Leaf,
    Unary(Unary, Var),
    Scale(Var, T),
    AddScalar(Var),
    Clamp(Var, T, T),
    Binary(Binary, Var, Var),
    MatMul { a: Var, b: Var, shared_rhs: bool },
    Permute { a: Var, axes: Vec<usize> },
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { a: Var, axis: usize, start: usize },
    Sum { a: Var, axis: usize, mean: bool },
    SumAll(Var),
    Softmax { a: Var, axis: usize },
    LayerNorm { a: Var, rstd: Vec<T> },
    MaxScalars { parts: Vec<Var>, winner: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records primitive applications for one forward pass.
///
/// A tape is single-use: [`Tape::backward`] consumes it. Tensors produced on a
/// tape are immutable; values stay readable after the backward pass.
pub struct Tape<T: Real = f64> {
    nodes: Vec<Node<T>>,
    strict: bool,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to the leaves that require them.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Gradient of `v`; panics if `v` is not a differentiable leaf.
    pub fn wrt(&self, v: Var) -> &Tensor<T> {
        self.get(v).expect("no gradient recorded for this variable")
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(128), strict: false, consumed: false }
    }

    /// A tape that rejects NaN/Inf operands on every primitive.
    pub fn strict() -> Self {
        Tape { strict: true, ..Self::new() }
    }

    pub fn set_strict(&mut self, strict: bool) {
        self.strict = strict;
    }

    pub fn is_strict(&self) -> bool {
        self.strict
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies the value of `v` into a new constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn check_finite(&self, op: &'static str, operands: &[Var]) -> Result<()> {
        if self.strict && operands.iter().any(|v| !self.value(*v).is_finite()) {
            return Err(DiffError::NonFinite { op });
        }
        Ok(())
    }

    fn rg(&self, operands: &[Var]) -> bool {
        operands.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Generic dispatcher over the primitive catalog.
    pub fn apply(&mut self, prim: &Primitive, operands: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if operands.len() == n {
                Ok(())
            } else {
                Err(DiffError::InvalidArgument {
                    op: "apply",
                    reason: format!("expected {n} operands, got {}", operands.len()),
                })
            }
        };
        match prim {
            Primitive::Unary(u) => {
                arity(1)?;
                self.unary(*u, operands[0])
            }
            Primitive::Binary(b) => {
                arity(2)?;
                self.binary(*b, operands[0], operands[1])
            }
            Primitive::Scale(c) => {
                arity(1)?;
                self.scale(operands[0], *c)
            }
            Primitive::AddScalar(c) => {
                arity(1)?;
                self.add_scalar(operands[0], *c)
            }
            Primitive::Clamp(lo, hi) => {
                arity(1)?;
                self.clamp(operands[0], *lo, *hi)
            }
            Primitive::MatMul => {
                arity(2)?;
                self.matmul(operands[0], operands[1])
            }
            Primitive::Transpose => {
                arity(1)?;
                self.transpose(operands[0])
            }
            Primitive::Permute(axes) => {
                arity(1)?;
                self.permute(operands[0], axes)
            }
            Primitive::Reshape(shape) => {
                arity(1)?;
                self.reshape(operands[0], shape)
            }
            Primitive::Concat { axis } => self.concat(operands, *axis),
            Primitive::Narrow { axis, start, len } => {
                arity(1)?;
                self.narrow(operands[0], *axis, *start, *len)
            }
            Primitive::Sum { axis, keepdim } => {
                arity(1)?;
                self.sum(operands[0], *axis, *keepdim)
            }
            Primitive::Mean { axis, keepdim } => {
                arity(1)?;
                self.mean(operands[0], *axis, *keepdim)
            }
            Primitive::SumAll => {
                arity(1)?;
                self.sum_all(operands[0])
            }
            Primitive::Softmax { axis } => {
                arity(1)?;
                self.softmax(operands[0], *axis)
            }
            Primitive::LayerNorm { eps } => {
                arity(1)?;
                self.layer_norm(operands[0], *eps)
            }
            Primitive::MaxScalars => self.max_scalars(operands),
        }
    }

    // ---------------------------------------------------------------- unary

    pub fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let name = match kind {
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Neg => "neg",
        };
        self.check_finite(name, &[a])?;
        let f: fn(T) -> T = match kind {
            Unary::Tanh => |x: T| x.tanh(),
            Unary::Sigmoid => sigmoid,
            Unary::Exp => |x: T| x.exp(),
            Unary::Log => |x: T| x.ln(),
            Unary::Neg => |x: T| -x,
        };
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Unary(kind, a), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Neg, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check_finite("scale", &[a])?;
        let c = T::c(c);
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Scale(a, c), rg))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check_finite("add_scalar", &[a])?;
        let c = T::c(c);
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::AddScalar(a), rg))
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient passes where the input
    /// lies inside the closed interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.check_finite("clamp", &[a])?;
        if lo > hi {
            return Err(DiffError::InvalidArgument {
                op: "clamp",
                reason: format!("lower bound {lo} exceeds upper bound {hi}"),
            });
        }
        let (lo, hi) = (T::c(lo), T::c(hi));
        let value = self.value(a).map(|x| x.max(lo).min(hi));
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Clamp(a, lo, hi), rg))
    }

    // --------------------------------------------------------------- binary

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        self.check_finite(name, &[a, b])?;
        let f: fn(T, T) -> T = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
        };
        let (va, vb) = (self.value(a), self.value(b));
        let value = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else {
            let shape = broadcast_shape(va.shape(), vb.shape()).ok_or_else(|| {
                DiffError::ShapeMismatch { op: name, lhs: va.shape().to_vec(), rhs: vb.shape().to_vec() }
            })?;
            let sa = broadcast_strides(va.shape(), &shape);
            let sb = broadcast_strides(vb.shape(), &shape);
            let (da, db) = (va.data(), vb.data());
            let mut data = Vec::with_capacity(numel(&shape));
            for_each_offset2(&shape, &sa, &sb, |_, ia, ib| data.push(f(da[ia], db[ib])));
            Tensor::new(shape, data)?
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    // --------------------------------------------------------------- matmul

    /// Matrix product over the two trailing axes.
    ///
    /// `b` is either a plain `K x N` matrix shared by every leading index of
    /// `a`, or carries the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_finite("matmul", &[a, b])?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || DiffError::ShapeMismatch { op: "matmul", lhs: sa.clone(), rhs: sb.clone() };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(mismatch());
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let mut out = vec![T::zero(); numel(&shape)];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        if shared_rhs {
            let rows = da.len() / k.max(1);
            let rows = if k == 0 { numel(&shape) / n.max(1) } else { rows };
            gemm(MatRef::new(da, rows, k), MatRef::new(db, k, n), &mut out, false);
        } else {
            let batch = numel(&sa[..sa.len() - 2]);
            for bi in 0..batch {
                gemm(
                    MatRef::new(&da[bi * m * k..(bi + 1) * m * k], m, k),
                    MatRef::new(&db[bi * k * n..(bi + 1) * k * n], k, n),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    false,
                );
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, shared_rhs }, rg))
    }

    // ------------------------------------------------------------ structure

    /// Swaps the two trailing axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(DiffError::InvalidArgument {
                op: "transpose",
                reason: format!("needs rank >= 2, got {rank}"),
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.check_finite("permute", &[a])?;
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = axes.len() == shape.len()
            && axes.iter().all(|&x| x < shape.len() && !std::mem::replace(&mut seen[x], true));
        if !valid {
            return Err(DiffError::InvalidArgument {
                op: "permute",
                reason: format!("{axes:?} is not a permutation of the axes of {shape:?}"),
            });
        }
        let data = permute(self.value(a).data(), &shape, axes);
        let value = Tensor::new(permuted_shape(&shape, axes), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Permute { a, axes: axes.to_vec() }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check_finite("reshape", &[a])?;
        let src = self.value(a);
        if numel(shape) != src.len() {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                lhs: src.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::new(shape.to_vec(), src.data().to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.check_finite("concat", parts)?;
        let first = parts.first().ok_or(DiffError::InvalidArgument {
            op: "concat",
            reason: "no operands".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(DiffError::InvalidAxis { op: "concat", axis, rank: base.len() });
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(DiffError::ShapeMismatch { op: "concat", lhs: base.clone(), rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_layout(&base, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let block = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_finite("narrow", &[a])?;
        let src = self.shape(a).to_vec();
        if axis >= src.len() {
            return Err(DiffError::InvalidAxis { op: "narrow", axis, rank: src.len() });
        }
        if start + len > src[axis] {
            return Err(DiffError::InvalidArgument {
                op: "narrow",
                reason: format!("range {start}..{} exceeds extent {}", start + len, src[axis]),
            });
        }
        let (outer, full, inner) = axis_layout(&src, axis);
        let d = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            data.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = src;
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Narrow { a, axis, start }, rg))
    }

    // ----------------------------------------------------------- reductions

    fn reduce(&mut self, a: Var, axis: usize, keepdim: bool, mean: bool) -> Result<Var> {
        let name = if mean { "mean" } else { "sum" };
        self.check_finite(name, &[a])?;
        let src = self.shape(a).to_vec();
        if axis >= src.len() {
            return Err(DiffError::InvalidAxis { op: name, axis, rank: src.len() });
        }
        let (outer, len, inner) = axis_layout(&src, axis);
        let d = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for j in 0..len {
                let row = &d[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (x, &y) in dst.iter_mut().zip(row) {
                    *x += y;
                }
            }
        }
        if mean {
            let inv = T::one() / T::from_usize(len).unwrap();
            out.iter_mut().for_each(|x| *x *= inv);
        }
        let mut shape = src;
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Sum { a, axis, mean }, rg))
    }

    pub fn sum(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce(a, axis, keepdim, false)
    }

    pub fn mean(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce(a, axis, keepdim, true)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.check_finite("sum_all", &[a])?;
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SumAll(a), rg))
    }

    /// Maximum over a set of one-element tensors.
    pub fn max_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        self.check_finite("max_scalars", parts)?;
        if parts.is_empty() {
            return Err(DiffError::InvalidArgument { op: "max_scalars", reason: "no operands".into() });
        }
        let mut winner = 0;
        let mut best = T::neg_infinity();
        for (i, p) in parts.iter().enumerate() {
            let v = self.value(*p);
            if v.len() != 1 {
                return Err(DiffError::InvalidArgument {
                    op: "max_scalars",
                    reason: format!("operand {i} has shape {:?}", v.shape()),
                });
            }
            if v.item() > best {
                best = v.item();
                winner = i;
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::scalar(best), Op::MaxScalars { parts: parts.to_vec(), winner }, rg))
    }

    // -------------------------------------------------------- normalization

    /// Softmax along `axis`, computed with per-slice max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_finite("softmax", &[a])?;
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(DiffError::InvalidAxis { op: "softmax", axis, rank: shape.len() });
        }
        let (outer, len, inner) = axis_layout(&shape, axis);
        let d = self.value(a).data();
        let mut out = vec![T::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(d[at(j)]);
                }
                let mut total = T::zero();
                for j in 0..len {
                    let e = (d[at(j)] - mx).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Softmax { a, axis }, rg))
    }

    /// Normalizes each slice along the trailing axis to zero mean and unit
    /// (biased) variance. No affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.check_finite("layer_norm", &[a])?;
        let shape = self.shape(a).to_vec();
        let width = *shape.last().ok_or(DiffError::InvalidAxis { op: "layer_norm", axis: 0, rank: 0 })?;
        let d = self.value(a).data();
        let rows = d.len() / width.max(1);
        let inv_w = T::one() / T::from_usize(width).unwrap();
        let eps = T::c(eps);
        let mut out = vec![T::zero(); d.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = &d[r * width..(r + 1) * width];
            let mu = x.iter().copied().sum::<T>() * inv_w;
            let var = x.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_w;
            let s = T::one() / (var + eps).sqrt();
            for (o, &v) in out[r * width..(r + 1) * width].iter_mut().zip(x) {
                *o = (v - mu) * s;
            }
            rstd.push(s);
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::LayerNorm { a, rstd }, rg))
    }

    // ------------------------------------------------------------- backward

    /// Reverse pass from a scalar `loss`.
    ///
    /// Every leaf created with `requires_grad` receives a gradient; leaves the
    /// loss does not depend on get zeros. The tape cannot be reused afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(DiffError::TapeConsumed);
        }
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(DiffError::NotScalar { shape: loss_value.shape().to_vec() });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.requires_grad) {
                (Op::Leaf, true) => {
                    let shape = node.value.shape().to_vec();
                    Some(match g {
                        Some(data) => Tensor::new(shape, data).expect("gradient shape"),
                        None => Tensor::zeros(shape),
                    })
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Unary(kind, a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let x = self.value(*a).data();
                    match kind {
                        Unary::Tanh => zip3(ga, g, y, |gi, yi| gi * (T::one() - yi * yi)),
                        Unary::Sigmoid => zip3(ga, g, y, |gi, yi| gi * yi * (T::one() - yi)),
                        Unary::Exp => zip3(ga, g, y, |gi, yi| gi * yi),
                        Unary::Log => zip3(ga, g, x, |gi, xi| gi / xi),
                        Unary::Neg => ga.iter_mut().zip(g).for_each(|(o, &gi)| *o -= gi),
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, &gi)| *o += gi * *c);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, &gi)| *o += gi);
                }
            }
            Op::Clamp(a, lo, hi) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let x = self.value(*a).data();
                    for ((o, &gi), &xi) in ga.iter_mut().zip(g).zip(x) {
                        if xi >= *lo && xi <= *hi {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Binary(kind, a, b) => self.backprop_binary(*kind, *a, *b, node.value.shape(), g, grads),
            Op::MatMul { a, b, shared_rhs } => self.backprop_matmul(*a, *b, *shared_rhs, g, grads),
            Op::Permute { a, axes } => {
                if let Some(ga) = self.slot(grads, *a) {
                    let back = permute(g, node.value.shape(), &inverse_axes(axes));
                    ga.iter_mut().zip(back).for_each(|(o, gi)| *o += gi);
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_layout(node.value.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    if let Some(gp) = self.slot(grads, *p) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut gp[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(x, &s)| *x += s);
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { a, axis, start } => {
                let len = node.value.shape()[*axis];
                let (outer, full, inner) = axis_layout(self.shape(*a), *axis);
                if let Some(ga) = self.slot(grads, *a) {
                    for o in 0..outer {
                        let base = o * full * inner + start * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        ga[base..base + len * inner].iter_mut().zip(src).for_each(|(x, &s)| *x += s);
                    }
                }
            }
            Op::Sum { a, axis, mean } => {
                let (outer, len, inner) = axis_layout(self.shape(*a), *axis);
                let w = if *mean { T::one() / T::from_usize(len).unwrap() } else { T::one() };
                if let Some(ga) = self.slot(grads, *a) {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for j in 0..len {
                            let dst = &mut ga[(o * len + j) * inner..(o * len + j + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(x, &s)| *x += s * w);
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::MaxScalars { parts, winner } => {
                if let Some(gw) = self.slot(grads, parts[*winner]) {
                    gw[0] += g[0];
                }
            }
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = axis_layout(node.value.shape(), *axis);
                if let Some(ga) = self.slot(grads, *a) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                ga[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { a, rstd } => {
                let width = *node.value.shape().last().unwrap();
                let inv_w = T::one() / T::from_usize(width).unwrap();
                if let Some(ga) = self.slot(grads, *a) {
                    for (r, &s) in rstd.iter().enumerate() {
                        let span = r * width..(r + 1) * width;
                        let (gr, yr) = (&g[span.clone()], &y[span.clone()]);
                        let mean_g = gr.iter().copied().sum::<T>() * inv_w;
                        let mean_gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() * inv_w;
                        for ((o, &gi), &yi) in ga[span].iter_mut().zip(gr).zip(yr) {
                            *o += s * (gi - mean_g - yi * mean_gy);
                        }
                    }
                }
            }
        }
    }

    fn backprop_binary(
        &self,
        kind: Binary,
        a: Var,
        b: Var,
        out_shape: &[usize],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (va, vb) = (self.value(a), self.value(b));
        let (da, db) = (va.data(), vb.data());
        let same = va.shape() == vb.shape();
        let sa = broadcast_strides(va.shape(), out_shape);
        let sb = broadcast_strides(vb.shape(), out_shape);
        let walk = |f: &mut dyn FnMut(usize, usize, usize)| {
            if same {
                (0..g.len()).for_each(|i| f(i, i, i));
            } else {
                for_each_offset2(out_shape, &sa, &sb, |o, ia, ib| f(o, ia, ib));
            }
        };
        if let Some(ga) = self.slot(grads, a) {
            match kind {
                Binary::Add | Binary::Sub => walk(&mut |o, ia, _| ga[ia] += g[o]),
                Binary::Mul => walk(&mut |o, ia, ib| ga[ia] += g[o] * db[ib]),
                Binary::Div => walk(&mut |o, ia, ib| ga[ia] += g[o] / db[ib]),
            }
        }
        if let Some(gb) = self.slot(grads, b) {
            match kind {
                Binary::Add => walk(&mut |o, _, ib| gb[ib] += g[o]),
                Binary::Sub => walk(&mut |o, _, ib| gb[ib] -= g[o]),
                Binary::Mul => walk(&mut |o, ia, ib| gb[ib] += g[o] * da[ia]),
                Binary::Div => walk(&mut |o, ia, ib| gb[ib] -= g[o] * da[ia] / (db[ib] * db[ib])),
            }
        }
    }

    fn backprop_matmul(&self, a: Var, b: Var, shared_rhs: bool, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        if shared_rhs {
            let rows = numel(sa) / k.max(1);
            let rows = if k == 0 { g.len() / n.max(1) } else { rows };
            if let Some(ga) = self.slot(grads, a) {
                gemm(MatRef::new(g, rows, n), MatRef::t(db, n, k), ga, true);
            }
            if let Some(gb) = self.slot(grads, b) {
                gemm(MatRef::t(da, k, rows), MatRef::new(g, rows, n), gb, true);
            }
        } else {
            let batch = numel(&sa[..sa.len() - 2]);
            if let Some(ga) = self.slot(grads, a) {
                for bi in 0..batch {
                    gemm(
                        MatRef::new(&g[bi * m * n..(bi + 1) * m * n], m, n),
                        MatRef::t(&db[bi * k * n..(bi + 1) * k * n], n, k),
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                        true,
                    );
                }
            }
            if let Some(gb) = self.slot(grads, b) {
                for bi in 0..batch {
                    gemm(
                        MatRef::t(&da[bi * m * k..(bi + 1) * m * k], k, m),
                        MatRef::new(&g[bi * m * n..(bi + 1) * m * n], m, n),
                        &mut gb[bi * k * n..(bi + 1) * k * n],
                        true,
                    );
                }
            }
        }
    }

    /// Zero-initialized gradient buffer of `v`, or `None` when `v` needs no
    /// gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    // split on sign so exp never overflows
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn zip3<T: Real>(out: &mut [T], g: &[T], y: &[T], f: impl Fn(T, T) -> T) {
    for ((o, &gi), &yi) in out.iter_mut().zip(g).zip(y) {
        *o += f(gi, yi);
    }
}
