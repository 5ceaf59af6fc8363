//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! Every operation appends one node holding its forward value, so node order
//! is already a topological order and backward is a single reverse sweep.
//! A fresh tape is built for every forward pass; shapes may change freely
//! between passes (pruning does exactly that).
//!
//! Broadcasting is deliberately narrow: elementwise ops accept equal shapes
//! or a one-element operand. Bias-style additions go through
//! [`Tape::add_bias`] / [`Tape::mul_trailing`], which broadcast a tensor over
//! the leading axes of another.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{AmpError, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, pairwise_sum, Tensor};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(0);

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEFF: f64 = 0.044_715;

/// Handle to a node on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: usize,
}

/// Handle to a tensor whose value and gradient are read back after
/// [`Tape::backward`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CaptureHandle(Var);

impl CaptureHandle {
    pub fn var(&self) -> Var {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    LhsScalar,
    RhsScalar,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    BatchMatMul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Add(usize, usize, Bcast),
    Sub(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    Scale(usize, f64),
    AddBias(usize, usize),
    MulTrailing(usize, usize),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        eps: f64,
    },
    Softmax {
        x: usize,
        tau: f64,
    },
    LogSoftmax(usize),
    XLogX(usize),
    Sum(usize),
    Mean(usize),
    L2Normalize(usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        a: usize,
        b: usize,
        axis: usize,
    },
    RepeatLeading(usize),
    Pick(usize, Vec<usize>),
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::BatchMatMul { a, b, .. }
            | Op::Add(a, b, _)
            | Op::Sub(a, b, _)
            | Op::Mul(a, b, _)
            | Op::AddBias(a, b)
            | Op::MulTrailing(a, b)
            | Op::Concat { a, b, .. } => vec![a, b],
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::Softmax { x, .. }
            | Op::LogSoftmax(x)
            | Op::XLogX(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::L2Normalize(x)
            | Op::Permute(x, _)
            | Op::Reshape(x)
            | Op::Narrow { x, .. }
            | Op::RepeatLeading(x)
            | Op::Pick(x, _) => vec![x],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-threaded recording of one forward computation.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    captured: Vec<bool>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            captured: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient on backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.captured.push(false);
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(AmpError::Contract(format!(
                "variable {v:?} does not belong to tape {}",
                self.id
            )));
        }
        Ok(v.idx)
    }

    /// Forward value of `v`.
    ///
    /// Panics if `v` was created on another tape.
    pub fn value(&self, v: Var) -> &Tensor {
        let i = self.idx(v).expect("foreign variable");
        &self.nodes[i].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Gradient of the last backward root with respect to `v`, if computed.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        let i = self.idx(v).ok()?;
        if !self.backward_done {
            return None;
        }
        self.grads.get(i).and_then(Option::as_ref)
    }

    /// Marks `v` so its gradient is retained even if no parameter sits
    /// behind it.
    pub fn capture(&mut self, v: Var) -> Result<CaptureHandle> {
        let i = self.idx(v)?;
        self.captured[i] = true;
        Ok(CaptureHandle(v))
    }

    pub fn captured_value(&self, h: CaptureHandle) -> &Tensor {
        self.value(h.0)
    }

    pub fn captured_grad(&self, h: CaptureHandle) -> Result<&Tensor> {
        if !self.backward_done {
            return Err(AmpError::State("captured gradient read before backward".into()));
        }
        let i = self.idx(h.0)?;
        self.grads[i]
            .as_ref()
            .ok_or_else(|| AmpError::State("capture has no gradient".into()))
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(out, Op::MatMul(ia, ib), rg))
    }

    /// Batched product over the leading axis: `[n×m×k]·[n×k×p]`, or
    /// `[n×m×k]·[n×p×k]ᵀ` when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        let bad = || AmpError::Dimension {
            op: "bmm",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (n, m, k) = (sa[0], sa[1], sa[2]);
        let p = if trans_b {
            if sb[2] != k {
                return Err(bad());
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(bad());
            }
            sb[2]
        };
        let (da, db) = (self.nodes[ia].value.data(), self.nodes[ib].value.data());
        let mut out = vec![0.0; n * m * p];
        for s in 0..n {
            let a_s = &da[s * m * k..(s + 1) * m * k];
            let b_s = &db[s * k * p..(s + 1) * k * p];
            let o_s = &mut out[s * m * p..(s + 1) * m * p];
            if trans_b {
                gemm_nt(a_s, b_s, o_s, m, k, p);
            } else {
                gemm_nn(a_s, b_s, o_s, m, k, p);
            }
        }
        let rg = self.rg(&[ia, ib]);
        let value = Tensor::new(vec![n, m, p], out)?;
        Ok(self.push(value, Op::BatchMatMul { a: ia, b: ib, trans_b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize, Bcast) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let bcast = if ta.shape() == tb.shape() {
            Bcast::Same
        } else if tb.numel() == 1 {
            Bcast::RhsScalar
        } else if ta.numel() == 1 {
            Bcast::LhsScalar
        } else {
            return Err(AmpError::Dimension {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        };
        let value = match bcast {
            Bcast::Same => Tensor::new(
                ta.shape().to_vec(),
                ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
            )?,
            Bcast::RhsScalar => {
                let y = tb.data()[0];
                ta.map(|x| f(x, y))
            }
            Bcast::LhsScalar => {
                let x = ta.data()[0];
                tb.map(|y| f(x, y))
            }
        };
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(value, op(ia, ib, bcast), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let ix = self.idx(x)?;
        let value = self.nodes[ix].value.map(|v| v * factor);
        let rg = self.rg(&[ix]);
        Ok(self.push(value, Op::Scale(ix, factor), rg))
    }

    /// `x + bias`, where `bias.shape` equals the trailing axes of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.trailing(x, bias, "add_bias", |a, b| a + b, Op::AddBias)
    }

    /// `x ⊙ w`, where `w.shape` equals the trailing axes of `x`.
    pub fn mul_trailing(&mut self, x: Var, w: Var) -> Result<Var> {
        self.trailing(x, w, "mul_trailing", |a, b| a * b, Op::MulTrailing)
    }

    fn trailing(
        &mut self,
        x: Var,
        y: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ix, iy) = (self.idx(x)?, self.idx(y)?);
        let (tx, ty) = (&self.nodes[ix].value, &self.nodes[iy].value);
        let (sx, sy) = (tx.shape(), ty.shape());
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != *sy {
            return Err(AmpError::Dimension {
                op: name,
                lhs: sx.to_vec(),
                rhs: sy.to_vec(),
            });
        }
        let inner = ty.numel();
        let yd = ty.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, yd[if inner == 0 { 0 } else { i % inner }]))
            .collect();
        let value = Tensor::new(sx.to_vec(), data)?;
        let rg = self.rg(&[ix, iy]);
        Ok(self.push(value, op(ix, iy), rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let value = self.nodes[ix].value.map(gelu);
        let rg = self.rg(&[ix]);
        Ok(self.push(value, Op::Gelu(ix), rg))
    }

    /// Normalizes the last axis, then applies `gain` and `bias` (both of the
    /// last-axis length).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gain)?, self.idx(bias)?);
        let tx = &self.nodes[ix].value;
        let d = tx.last_dim();
        let (tg, tb) = (&self.nodes[ig].value, &self.nodes[ib].value);
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(AmpError::Dimension {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        if eps <= 0.0 {
            return Err(AmpError::Parameter(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (gd, bd) = (tg.data(), tb.data());
        let mut out = vec![0.0; tx.numel()];
        for (row, orow) in tx.data().chunks(d).zip(out.chunks_mut(d)) {
            let (mean, rstd) = row_stats(row, eps);
            for (j, o) in orow.iter_mut().enumerate() {
                *o = (row[j] - mean) * rstd * gd[j] + bd[j];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[ix, ig, ib]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: ix,
                gain: ig,
                bias: ib,
                eps,
            },
            rg,
        ))
    }

    /// Softmax over the last axis of `x / tau`, with max subtraction.
    pub fn softmax(&mut self, x: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(AmpError::Parameter(format!(
                "softmax temperature must be > 0, got {tau}"
            )));
        }
        let ix = self.idx(x)?;
        let tx = &self.nodes[ix].value;
        let d = tx.last_dim();
        let mut out = vec![0.0; tx.numel()];
        for (row, orow) in tx.data().chunks(d).zip(out.chunks_mut(d)) {
            softmax_row(row, tau, orow);
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[ix]);
        Ok(self.push(value, Op::Softmax { x: ix, tau }, rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let tx = &self.nodes[ix].value;
        let d = tx.last_dim();
        let mut out = vec![0.0; tx.numel()];
        for (row, orow) in tx.data().chunks(d).zip(out.chunks_mut(d)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            for (o, v) in orow.iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[ix]);
        Ok(self.push(value, Op::LogSoftmax(ix), rg))
    }

    /// Elementwise `x·ln x`, with `0·ln 0 = 0`. Inputs must be non-negative.
    pub fn xlogx(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let tx = &self.nodes[ix].value;
        if let Some(bad) = tx.data().iter().find(|v| !(**v >= 0.0)) {
            return Err(AmpError::NumericDomain(format!("xlogx of {bad}")));
        }
        let value = tx.map(|v| if v == 0.0 { 0.0 } else { v * v.ln() });
        let rg = self.rg(&[ix]);
        Ok(self.push(value, Op::XLogX(ix), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let s = pairwise_sum(self.nodes[ix].value.data());
        let rg = self.rg(&[ix]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(ix), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = &self.nodes[ix].value;
        if t.numel() == 0 {
            return Err(AmpError::Shape("mean of empty tensor".into()));
        }
        let m = pairwise_sum(t.data()) / t.numel() as f64;
        let rg = self.rg(&[ix]);
        Ok(self.push(Tensor::scalar(m), Op::Mean(ix), rg))
    }

    /// Scales each last-axis row to unit Euclidean norm. A zero row is an
    /// error, not a silently patched value.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let tx = &self.nodes[ix].value;
        let d = tx.last_dim();
        let mut out = vec![0.0; tx.numel()];
        for (r, (row, orow)) in tx.data().chunks(d).zip(out.chunks_mut(d)).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(AmpError::NumericDomain(format!(
                    "row {r} has norm {norm}; cosine similarity is undefined"
                )));
            }
            for (o, v) in orow.iter_mut().zip(row) {
                *o = v / norm;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[ix]);
        Ok(self.push(value, Op::L2Normalize(ix), rg))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(AmpError::Shape(format!(
                "transpose expects a matrix, got {:?}",
                self.shape(x)
            )));
        }
        self.permute(x, &[1, 0])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let tx = &self.nodes[ix].value;
        let mut seen = vec![false; tx.rank()];
        if perm.len() != tx.rank()
            || perm
                .iter()
                .any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(AmpError::Shape(format!(
                "invalid permutation {perm:?} for shape {:?}",
                tx.shape()
            )));
        }
        let value = permute_tensor(tx, perm);
        let rg = self.rg(&[ix]);
        Ok(self.push(value, Op::Permute(ix, perm.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let value = self.nodes[ix].value.clone().reshape(shape)?;
        let rg = self.rg(&[ix]);
        Ok(self.push(value, Op::Reshape(ix), rg))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let tx = &self.nodes[ix].value;
        let shape = tx.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(AmpError::Shape(format!(
                "narrow axis {axis} [{start}, {}) out of range for {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&tx.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        let rg = self.rg(&[ix]);
        Ok(self.push(value, Op::Narrow { x: ix, axis, start }, rg))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(AmpError::Dimension {
                op: "concat",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let (ca, cb) = (sa[axis] * inner, sb[axis] * inner);
        let mut data = Vec::with_capacity(ta.numel() + tb.numel());
        for o in 0..outer {
            data.extend_from_slice(&ta.data()[o * ca..(o + 1) * ca]);
            data.extend_from_slice(&tb.data()[o * cb..(o + 1) * cb]);
        }
        let mut shape = sa.to_vec();
        shape[axis] += sb[axis];
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(value, Op::Concat { a: ia, b: ib, axis }, rg))
    }

    /// Stacks `n` copies of `x` along a new leading axis.
    pub fn repeat_leading(&mut self, x: Var, n: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let tx = &self.nodes[ix].value;
        let mut shape = vec![n];
        shape.extend_from_slice(tx.shape());
        let data = tx.data().repeat(n);
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[ix]);
        Ok(self.push(value, Op::RepeatLeading(ix), rg))
    }

    /// Row-wise gather from a matrix: `out[i] = x[i, indices[i]]`.
    pub fn pick(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let tx = &self.nodes[ix].value;
        let s = tx.shape();
        if s.len() != 2 || s[0] != indices.len() {
            return Err(AmpError::Shape(format!("pick of {} indices from {s:?}", indices.len())));
        }
        if let Some(&bad) = indices.iter().find(|&&j| j >= s[1]) {
            return Err(AmpError::Parameter(format!("index {bad} out of range [0, {})", s[1])));
        }
        let data = indices
            .iter()
            .enumerate()
            .map(|(i, &j)| tx.data()[i * s[1] + j])
            .collect();
        let value = Tensor::new(vec![indices.len()], data)?;
        let rg = self.rg(&[ix]);
        Ok(self.push(value, Op::Pick(ix, indices.to_vec()), rg))
    }

    fn rg(&self, parents: &[usize]) -> bool {
        parents.iter().any(|&p| self.nodes[p].requires_grad)
    }

    // ----------------------------------------------------------- backward

    /// Populates gradients of the scalar `root` for every node that needs
    /// one: parameters, captured tensors, and everything between them and
    /// the root. Nodes that need a gradient but are unreachable from `root`
    /// get zeros. Earlier gradients are discarded, never accumulated.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let r = self.idx(root)?;
        if self.nodes[r].value.numel() != 1 {
            return Err(AmpError::Contract(format!(
                "backward root must be a scalar, got shape {:?}",
                self.nodes[r].value.shape()
            )));
        }
        let n = self.nodes.len();
        let mut needs = vec![false; n];
        for i in 0..n {
            needs[i] =
                self.nodes[i].requires_grad || self.captured[i] || self.nodes[i].op.parents().iter().any(|&p| needs[p]);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[r] = Some(vec![1.0]);
        for i in (0..=r).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &needs, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                if !needs[i] {
                    return None;
                }
                let shape = self.nodes[i].value.shape().to_vec();
                Some(match g {
                    Some(data) => Tensor::new(shape, data).expect("gradient shape"),
                    None => Tensor::zeros(&shape),
                })
            })
            .collect();
        self.backward_done = true;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], needs: &[bool], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |p: usize| &self.nodes[p].value;
        let mut acc = |p: usize, contrib: &dyn Fn(&mut [f64])| {
            if !needs[p] {
                return;
            }
            let len = self.nodes[p].value.numel();
            let slot = grads[p].get_or_insert_with(|| vec![0.0; len]);
            contrib(slot);
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                acc(a, &|ga| gemm_nt(g, tb.data(), ga, m, n, k));
                acc(b, &|gb| gemm_tn(ta.data(), g, gb, m, k, n));
            }
            &Op::BatchMatMul { a, b, trans_b } => {
                let (ta, tb) = (val(a), val(b));
                let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let p = node.value.shape()[2];
                acc(a, &|ga| {
                    for s in 0..bs {
                        let gs = &g[s * m * p..(s + 1) * m * p];
                        let bsl = &tb.data()[s * k * p..(s + 1) * k * p];
                        let out = &mut ga[s * m * k..(s + 1) * m * k];
                        if trans_b {
                            gemm_nn(gs, bsl, out, m, p, k);
                        } else {
                            gemm_nt(gs, bsl, out, m, p, k);
                        }
                    }
                });
                acc(b, &|gb| {
                    for s in 0..bs {
                        let gs = &g[s * m * p..(s + 1) * m * p];
                        let asl = &ta.data()[s * m * k..(s + 1) * m * k];
                        let out = &mut gb[s * k * p..(s + 1) * k * p];
                        if trans_b {
                            gemm_tn(gs, asl, out, m, p, k);
                        } else {
                            gemm_tn(asl, gs, out, m, k, p);
                        }
                    }
                });
            }
            &Op::Add(a, b, bc) | &Op::Sub(a, b, bc) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(a, &|ga| match bc {
                    Bcast::LhsScalar => ga[0] += g.iter().sum::<f64>(),
                    _ => ga.iter_mut().zip(g).for_each(|(o, v)| *o += v),
                });
                acc(b, &|gb| match bc {
                    Bcast::RhsScalar => gb[0] += sign * g.iter().sum::<f64>(),
                    _ => gb.iter_mut().zip(g).for_each(|(o, v)| *o += sign * v),
                });
            }
            &Op::Mul(a, b, bc) => {
                let (da, db) = (val(a).data(), val(b).data());
                acc(a, &|ga| match bc {
                    Bcast::Same => ga.iter_mut().zip(g).zip(db).for_each(|((o, v), y)| *o += v * y),
                    Bcast::RhsScalar => ga.iter_mut().zip(g).for_each(|(o, v)| *o += v * db[0]),
                    Bcast::LhsScalar => ga[0] += g.iter().zip(db).map(|(v, y)| v * y).sum::<f64>(),
                });
                acc(b, &|gb| match bc {
                    Bcast::Same => gb.iter_mut().zip(g).zip(da).for_each(|((o, v), x)| *o += v * x),
                    Bcast::LhsScalar => gb.iter_mut().zip(g).for_each(|(o, v)| *o += v * da[0]),
                    Bcast::RhsScalar => gb[0] += g.iter().zip(da).map(|(v, x)| v * x).sum::<f64>(),
                });
            }
            &Op::Scale(x, f) => acc(x, &|gx| gx.iter_mut().zip(g).for_each(|(o, v)| *o += v * f)),
            &Op::AddBias(x, b) => {
                acc(x, &|gx| gx.iter_mut().zip(g).for_each(|(o, v)| *o += v));
                let inner = val(b).numel();
                if inner > 0 {
                    acc(b, &|gb| {
                        for chunk in g.chunks(inner) {
                            gb.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
                        }
                    });
                }
            }
            &Op::MulTrailing(x, w) => {
                let (dx, dw) = (val(x).data(), val(w).data());
                let inner = dw.len();
                if inner > 0 {
                    acc(x, &|gx| {
                        for (gc, go) in gx.chunks_mut(inner).zip(g.chunks(inner)) {
                            for j in 0..inner {
                                gc[j] += go[j] * dw[j];
                            }
                        }
                    });
                    acc(w, &|gw| {
                        for (xc, go) in dx.chunks(inner).zip(g.chunks(inner)) {
                            for j in 0..inner {
                                gw[j] += go[j] * xc[j];
                            }
                        }
                    });
                }
            }
            &Op::Gelu(x) => {
                let dx = val(x).data();
                acc(x, &|gx| {
                    for ((o, v), &xv) in gx.iter_mut().zip(g).zip(dx) {
                        *o += v * gelu_grad(xv);
                    }
                });
            }
            &Op::LayerNorm { x, gain, bias, eps } => {
                let tx = val(x);
                let d = tx.last_dim();
                let gd = val(gain).data();
                // normalized rows are recomputed rather than stored
                let mut normed = vec![0.0; tx.numel()];
                let mut rstds = Vec::with_capacity(tx.numel() / d.max(1));
                for (row, nrow) in tx.data().chunks(d).zip(normed.chunks_mut(d)) {
                    let (mean, rstd) = row_stats(row, eps);
                    for (n, v) in nrow.iter_mut().zip(row) {
                        *n = (v - mean) * rstd;
                    }
                    rstds.push(rstd);
                }
                acc(x, &|gx| {
                    for (((gxr, gor), nrow), &rstd) in
                        gx.chunks_mut(d).zip(g.chunks(d)).zip(normed.chunks(d)).zip(&rstds)
                    {
                        let mut mean_gy = 0.0;
                        let mut mean_gyn = 0.0;
                        for j in 0..d {
                            let gy = gor[j] * gd[j];
                            mean_gy += gy;
                            mean_gyn += gy * nrow[j];
                        }
                        mean_gy /= d as f64;
                        mean_gyn /= d as f64;
                        for j in 0..d {
                            let gy = gor[j] * gd[j];
                            gxr[j] += rstd * (gy - mean_gy - nrow[j] * mean_gyn);
                        }
                    }
                });
                acc(gain, &|gg| {
                    for (gor, nrow) in g.chunks(d).zip(normed.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gor[j] * nrow[j];
                        }
                    }
                });
                acc(bias, &|gb| {
                    for gor in g.chunks(d) {
                        gb.iter_mut().zip(gor).for_each(|(o, v)| *o += v);
                    }
                });
            }
            &Op::Softmax { x, tau } => {
                let d = node.value.last_dim();
                let y = node.value.data();
                acc(x, &|gx| {
                    for ((gxr, gor), yr) in gx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                        let dot: f64 = gor.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gxr[j] += yr[j] * (gor[j] - dot) / tau;
                        }
                    }
                });
            }
            &Op::LogSoftmax(x) => {
                let d = node.value.last_dim();
                let y = node.value.data();
                acc(x, &|gx| {
                    for ((gxr, gor), yr) in gx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                        let total: f64 = gor.iter().sum();
                        for j in 0..d {
                            gxr[j] += gor[j] - yr[j].exp() * total;
                        }
                    }
                });
            }
            &Op::XLogX(x) => {
                let dx = val(x).data();
                // an underflowed probability contributes nothing: the softmax
                // Jacobian feeding it carries the same vanishing factor
                acc(x, &|gx| {
                    for ((o, v), &xv) in gx.iter_mut().zip(g).zip(dx) {
                        if xv > 0.0 {
                            *o += v * (xv.ln() + 1.0);
                        }
                    }
                });
            }
            &Op::Sum(x) => acc(x, &|gx| gx.iter_mut().for_each(|o| *o += g[0])),
            &Op::Mean(x) => {
                let n = val(x).numel() as f64;
                acc(x, &|gx| gx.iter_mut().for_each(|o| *o += g[0] / n));
            }
            &Op::L2Normalize(x) => {
                let tx = val(x);
                let d = tx.last_dim();
                let y = node.value.data();
                acc(x, &|gx| {
                    for (((gxr, gor), yr), xr) in gx
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(y.chunks(d))
                        .zip(tx.data().chunks(d))
                    {
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dot: f64 = gor.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gxr[j] += (gor[j] - yr[j] * dot) / norm;
                        }
                    }
                });
            }
            Op::Permute(x, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec()).expect("grad shape");
                let back = permute_tensor(&gt, &inverse);
                acc(*x, &|gx| gx.iter_mut().zip(back.data()).for_each(|(o, v)| *o += v));
            }
            &Op::Reshape(x) => acc(x, &|gx| gx.iter_mut().zip(g).for_each(|(o, v)| *o += v)),
            &Op::Narrow { x, axis, start } => {
                let shape = val(x).shape();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let (full, len) = (shape[axis], node.value.shape()[axis]);
                acc(x, &|gx| {
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        for j in 0..len * inner {
                            gx[dst + j] += g[src + j];
                        }
                    }
                });
            }
            &Op::Concat { a, b, axis } => {
                let (sa, sb) = (val(a).shape(), val(b).shape());
                let outer: usize = sa[..axis].iter().product();
                let inner: usize = sa[axis + 1..].iter().product();
                let (ca, cb) = (sa[axis] * inner, sb[axis] * inner);
                acc(a, &|ga| {
                    for o in 0..outer {
                        for j in 0..ca {
                            ga[o * ca + j] += g[o * (ca + cb) + j];
                        }
                    }
                });
                acc(b, &|gb| {
                    for o in 0..outer {
                        for j in 0..cb {
                            gb[o * cb + j] += g[o * (ca + cb) + ca + j];
                        }
                    }
                });
            }
            &Op::RepeatLeading(x) => {
                let inner = val(x).numel();
                if inner > 0 {
                    acc(x, &|gx| {
                        for chunk in g.chunks(inner) {
                            gx.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
                        }
                    });
                }
            }
            Op::Pick(x, indices) => {
                let k = val(*x).shape()[1];
                acc(*x, &|gx| {
                    for (i, &j) in indices.iter().enumerate() {
                        gx[i * k + j] += g[i];
                    }
                });
            }
        }
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x)
}

/// Mean and reciprocal standard deviation (biased variance) of one row.
fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

pub(crate) fn softmax_row(row: &[f64], tau: f64, out: &mut [f64]) {
    let max = row.iter().map(|v| v / tau).fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v / tau - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = t.numel();
    let mut data = Vec::with_capacity(n);
    let mut index = vec![0usize; rank];
    let src = t.data();
    let mut offset = 0usize;
    for _ in 0..n {
        data.push(src[offset]);
        for ax in (0..rank).rev() {
            index[ax] += 1;
            offset += strides[ax];
            if index[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            index[ax] = 0;
        }
    }
    Tensor::new(out_shape, data).expect("permute shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(AmpError::Contract(_))));
    }

    #[test]
    fn repeated_backward_does_not_accumulate() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2], vec![1.5, -0.5]).unwrap());
        let y = tape.gelu(x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        let first = tape.grad(x).unwrap().clone();
        tape.backward(s).unwrap();
        assert!(first.bit_eq(tape.grad(x).unwrap()));
    }

    #[test]
    fn foreign_variable_is_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.param(Tensor::scalar(1.0));
        assert!(matches!(b.sum(x), Err(AmpError::Contract(_))));
    }

    #[test]
    fn gelu_at_zero() {
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 4], 3.25));
        let g = tape.constant(Tensor::ones(&[4]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 0.0]).unwrap());
        let y = tape.softmax(x, 1.0).unwrap();
        let d = tape.value(y).data();
        assert_eq!(&d[..2], &[0.5, 0.5]);
        assert!((d[2] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((d[3] - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert!(matches!(tape.softmax(x, 0.0), Err(AmpError::Parameter(_))));
        assert!(matches!(tape.softmax(x, -1.0), Err(AmpError::Parameter(_))));
    }

    #[test]
    fn capture_before_backward_is_state_error() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(&[3]));
        let h = tape.capture(x).unwrap();
        assert!(matches!(tape.captured_grad(h), Err(AmpError::State(_))));
    }

    #[test]
    fn captured_dead_branch_gets_zeros() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[3]));
        let dead = tape.scale(x, 2.0).unwrap();
        let h = tape.capture(dead).unwrap();
        let w = tape.param(Tensor::ones(&[3]));
        let y = tape.mul(x, w).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.captured_grad(h).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn capture_of_constant_intermediate_gets_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let h = tape.scale(x, 3.0).unwrap();
        let cap = tape.capture(h).unwrap();
        let sq = tape.mul(h, h).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.captured_grad(cap).unwrap().data(), &[6.0, -12.0]);
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn permute_roundtrip() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        let p = permute_tensor(&t, &[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        // element [i,j,k] of t lands at [k,i,j]
        assert_eq!(p.data()[(3 * 2 + 1) * 3 + 2], t.data()[(3 + 2) * 4 + 3]);
        let back = permute_tensor(&p, &[1, 2, 0]);
        assert!(back.bit_eq(&t));
    }

    #[test]
    fn narrow_and_concat_invert() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 5, 3], |i| i as f64));
        let a = tape.narrow(x, 1, 0, 1).unwrap();
        let b = tape.narrow(x, 1, 1, 4).unwrap();
        let c = tape.concat(a, b, 1).unwrap();
        assert!(tape.value(c).bit_eq(tape.value(x)));
    }

    #[test]
    fn zero_width_matmul() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::ones(&[3, 0]));
        let b = tape.param(Tensor::ones(&[0, 2]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[0.0; 6]);
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().numel(), 0);
    }
}
