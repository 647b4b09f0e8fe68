//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes are
//! appended in evaluation order, so a single reverse sweep over the node list
//! is a valid topological order for [`Tape::backward`].
//!
//! Broadcasting follows one rule only: after stripping leading unit axes, the
//! smaller operand's shape must be a suffix of the larger operand's shape. The
//! smaller operand then repeats cyclically over the row-major data.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamId, ParameterStore};
use crate::tensor::{gemm, rows_cols, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum Unary {
    Tanh,
    Exp,
    Sigmoid,
    Relu,
    Log,
    Square,
    Recip,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Unary(Var, Unary),
    ClampMin(Var, f64),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Sum(Var),
    SumAxis(Var, usize),
    Reshape(Var),
    Transpose(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for later differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, if `v` participates in the loss.
    pub fn get(&self, tape: &Tape, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| {
            Tensor::new(tape.value(v).shape().to_vec(), g.clone())
                .expect("gradient shape matches value")
        })
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strip_leading_ones(shape: &[usize]) -> &[usize] {
    let first = shape.iter().position(|&d| d != 1).unwrap_or(shape.len());
    &shape[first..]
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let (sa, sb) = (strip_leading_ones(a), strip_leading_ones(b));
    let (big, small, big_full) = if sa.len() >= sb.len() {
        (sa, sb, a)
    } else {
        (sb, sa, b)
    };
    if big[big.len() - small.len()..] == *small {
        Some(big_full.to_vec())
    } else {
        None
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input: no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free leaf whose gradient is tracked.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Loads a parameter from the store. Repeated loads share one node.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `[B, n, m] x [B, m, d] -> [B, n, d]`, one product per leading index.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::dim("batch_matmul", sa, sb));
        }
        let (bn, n, m, d) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bn * n * d];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bn {
            gemm(
                n,
                m,
                d,
                &da[i * n * m..(i + 1) * n * m],
                false,
                &db[i * m * d..(i + 1) * m * d],
                false,
                &mut out[i * n * d..(i + 1) * n * d],
                0.0,
            );
        }
        let t = Tensor::new(vec![bn, n, d], out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::BatchMatMul(a, b), ng))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(ta.shape(), tb.shape())
            .ok_or_else(|| Error::dim(name, ta.shape(), tb.shape()))?;
        let n: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let (la, lb) = (da.len(), db.len());
        let data = (0..n).map(|i| f(da[i % la], db[i % lb])).collect();
        Tensor::new(shape, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).map(|x| x * k);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, k), ng)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).map(|x| x + k);
        let ng = self.ng(a);
        self.push(t, Op::Offset(a), ng)
    }

    fn unary(&mut self, a: Var, u: Unary) -> Var {
        let f: fn(f64) -> f64 = match u {
            Unary::Tanh => f64::tanh,
            Unary::Exp => f64::exp,
            Unary::Sigmoid => |x| 1.0 / (1.0 + (-x).exp()),
            Unary::Relu => |x| x.max(0.0),
            Unary::Log => f64::ln,
            Unary::Square => |x| x * x,
            Unary::Recip => |x| 1.0 / x,
        };
        let t = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(t, Op::Unary(a, u), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Recip)
    }

    /// `max(a, floor)` elementwise; the gradient is zero where the floor binds.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let t = self.value(a).map(|x| x.max(floor));
        let ng = self.ng(a);
        self.push(t, Op::ClampMin(a, floor), ng)
    }

    fn check_axis(&self, a: Var, axis: usize, op: &'static str) -> Result<()> {
        let s = self.value(a).shape();
        if axis >= s.len() {
            return Err(Error::dim(op, s, &[axis]));
        }
        Ok(())
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "softmax")?;
        let t = softmax_axis(self.value(a), axis, false);
        let ng = self.ng(a);
        Ok(self.push(t, Op::Softmax(a, axis), ng))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "log_softmax")?;
        let t = softmax_axis(self.value(a), axis, true);
        let ng = self.ng(a);
        Ok(self.push(t, Op::LogSoftmax(a, axis), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(t, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "sum_axis")?;
        let src = self.value(a);
        let (outer, len, inner) = split_axis(src.shape(), axis);
        let d = src.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        let mut shape = src.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::SumAxis(a, axis), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose2()?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Transpose(a), ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        self.check_axis(first, axis, "concat")?;
        let base = self.value(first).shape().to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let same_rank = s.len() == base.len();
            if !same_rank
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(t, Op::Concat(parts.to_vec(), axis), ng))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(a, axis, "slice")?;
        let src = self.value(a);
        let (outer, alen, inner) = split_axis(src.shape(), axis);
        if start + len > alen {
            return Err(Error::dim("slice", src.shape(), &[start, len]));
        }
        let d = src.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * alen + start) * inner;
            out.extend_from_slice(&d[from..from + len * inner]);
        }
        let mut shape = src.shape().to_vec();
        shape[axis] = len;
        let t = Tensor::new(shape, out)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Slice(a, axis, start), ng))
    }

    /// Reverse sweep from a scalar `loss`. Buffers start from zero on every call.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let len_of = |v: Var| self.nodes[v.0].value.len();
        match node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k) = rows_cols(ta.shape()).unwrap();
                let n = tb.shape()[1];
                if self.ng(a) {
                    let da = accumulate(&mut grads[a.0], m * k);
                    gemm(m, n, k, g, false, tb.data(), true, da, 1.0);
                }
                if self.ng(b) {
                    let db = accumulate(&mut grads[b.0], k * n);
                    gemm(k, m, n, ta.data(), true, g, false, db, 1.0);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (bn, n, m, d) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
                if self.ng(a) {
                    let da = accumulate(&mut grads[a.0], bn * n * m);
                    for i in 0..bn {
                        gemm(
                            n,
                            d,
                            m,
                            &g[i * n * d..(i + 1) * n * d],
                            false,
                            &tb.data()[i * m * d..(i + 1) * m * d],
                            true,
                            &mut da[i * n * m..(i + 1) * n * m],
                            1.0,
                        );
                    }
                }
                if self.ng(b) {
                    let db = accumulate(&mut grads[b.0], bn * m * d);
                    for i in 0..bn {
                        gemm(
                            m,
                            n,
                            d,
                            &ta.data()[i * n * m..(i + 1) * n * m],
                            true,
                            &g[i * n * d..(i + 1) * n * d],
                            false,
                            &mut db[i * m * d..(i + 1) * m * d],
                            1.0,
                        );
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (la, lb) = (len_of(a), len_of(b));
                let (da, db) = (self.value(a).data(), self.value(b).data());
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let is_mul = matches!(node.op, Op::Mul(..));
                if self.ng(a) {
                    let ga = accumulate(&mut grads[a.0], la);
                    for (i, &gi) in g.iter().enumerate() {
                        ga[i % la] += if is_mul { gi * db[i % lb] } else { gi };
                    }
                }
                if self.ng(b) {
                    let gb = accumulate(&mut grads[b.0], lb);
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % lb] += if is_mul { gi * da[i % la] } else { sign * gi };
                    }
                }
            }
            Op::Scale(a, k) => {
                let ga = accumulate(&mut grads[a.0], g.len());
                for (d, &gi) in ga.iter_mut().zip(g) {
                    *d += k * gi;
                }
            }
            Op::Offset(a) | Op::Reshape(a) => {
                let ga = accumulate(&mut grads[a.0], g.len());
                for (d, &gi) in ga.iter_mut().zip(g) {
                    *d += gi;
                }
            }
            Op::Unary(a, u) => {
                let x = self.value(a).data();
                let ga = accumulate(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    let local = match u {
                        Unary::Tanh => 1.0 - y[i] * y[i],
                        Unary::Exp => y[i],
                        Unary::Sigmoid => y[i] * (1.0 - y[i]),
                        Unary::Relu => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Log => 1.0 / x[i],
                        Unary::Square => 2.0 * x[i],
                        Unary::Recip => -y[i] * y[i],
                    };
                    ga[i] += g[i] * local;
                }
            }
            Op::ClampMin(a, floor) => {
                let x = self.value(a).data();
                let ga = accumulate(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    if x[i] > floor {
                        ga[i] += g[i];
                    }
                }
            }
            Op::Softmax(a, axis) | Op::LogSoftmax(a, axis) => {
                let log = matches!(node.op, Op::LogSoftmax(..));
                let (outer, len, inner) = split_axis(node.value.shape(), axis);
                let ga = accumulate(&mut grads[a.0], g.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        if log {
                            let gs: f64 = (0..len).map(|l| g[at(l)]).sum();
                            for l in 0..len {
                                ga[at(l)] += g[at(l)] - y[at(l)].exp() * gs;
                            }
                        } else {
                            let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                ga[at(l)] += y[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let la = len_of(a);
                let ga = accumulate(&mut grads[a.0], la);
                for d in ga.iter_mut() {
                    *d += g[0];
                }
            }
            Op::SumAxis(a, axis) => {
                let (outer, len, inner) = split_axis(self.value(a).shape(), axis);
                let ga = accumulate(&mut grads[a.0], outer * len * inner);
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            ga[base + i] += g[o * inner + i];
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let s = self.value(a).shape();
                let (r, c) = (s[0], s[1]);
                let ga = accumulate(&mut grads[a.0], r * c);
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Concat(ref parts, axis) => {
                let (outer, total, inner) = split_axis(node.value.shape(), axis);
                let mut offset = 0;
                for &p in parts {
                    let plen = self.value(p).shape()[axis];
                    if self.ng(p) {
                        let gp = accumulate(&mut grads[p.0], outer * plen * inner);
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * plen * inner;
                            for i in 0..plen * inner {
                                gp[dst + i] += g[src + i];
                            }
                        }
                    }
                    offset += plen;
                }
            }
            Op::Slice(a, axis, start) => {
                let (outer, alen, inner) = split_axis(self.value(a).shape(), axis);
                let len = node.value.shape()[axis];
                let ga = accumulate(&mut grads[a.0], outer * alen * inner);
                for o in 0..outer {
                    let dst = (o * alen + start) * inner;
                    let src = o * len * inner;
                    for i in 0..len * inner {
                        ga[dst + i] += g[src + i];
                    }
                }
            }
        }
    }

    /// Collects gradients for every parameter loaded on this tape. Parameters
    /// that were loaded but do not influence the loss get zero gradients.
    pub fn param_grads(&self, store: &ParameterStore, grads: &Gradients) -> ParamGrads {
        let mut out = ParamGrads::empty(store.len());
        for (&id, &v) in &self.params {
            let g = grads
                .get(self, v)
                .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
            out.set(id, g);
        }
        out
    }
}

fn softmax_axis(t: &Tensor, axis: usize, log: bool) -> Tensor {
    let (outer, len, inner) = split_axis(t.shape(), axis);
    let x = t.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let max = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..len).map(|l| (x[at(l)] - max).exp()).sum();
            for l in 0..len {
                out[at(l)] = if log {
                    x[at(l)] - max - z.ln()
                } else {
                    (x[at(l)] - max).exp() / z
                };
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out).expect("same shape")
}

/// Softmax of a plain tensor along `axis`, outside any tape.
pub fn softmax(t: &Tensor, axis: usize) -> Tensor {
    softmax_axis(t, axis, false)
}
