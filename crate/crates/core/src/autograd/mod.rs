//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and the information needed to push gradients back to its inputs. Graphs
//! are cheap and meant to be rebuilt for every forward pass. Parameter leaves
//! borrow their values from a [`ParamStore`], so building a graph never
//! copies weights.

pub mod kernels;

use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{split_around, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Sqrt(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<F>,
    },
    RowCosine {
        a: Var,
        b: Var,
        na: Vec<F>,
        nb: Vec<F>,
    },
}

struct Node<'a, F: Real> {
    value: Cow<'a, Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// Reverse-mode tape. The lifetime ties borrowed parameter values to the
/// store they came from.
pub struct Graph<'a, F: Real> {
    nodes: Vec<Node<'a, F>>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Tensor<F>>>,
    backward_done: bool,
}

impl<F: Real> Default for Graph<'_, F> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn rank2(op: &'static str, t: &Tensor<impl Real>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::invalid(op, format!("expected a rank-2 tensor, got {s:?}"))),
    }
}

impl<'a, F: Real> Graph<'a, F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
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

    fn push(&mut self, value: Cow<'a, Tensor<F>>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked and can be read after backward.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// A leaf borrowing a stored parameter. Repeated calls with the same id
    /// return the same node. Frozen parameters get no gradient.
    pub fn param(&mut self, store: &'a ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(
            Cow::Borrowed(store.get(id)),
            Op::Param,
            store.is_trainable(id),
        );
        self.params.insert(id, v);
        v
    }

    /// Copies a value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rank2("matmul", self.value(a))?;
        let (k2, n) = rank2("matmul", self.value(b))?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.derived(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `x[rows×in] · w[out×in]ᵀ + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (rows, fan_in) = rank2("linear", self.value(x))?;
        let (fan_out, w_in) = rank2("linear", self.value(w))?;
        if fan_in != w_in {
            return Err(mismatch("linear", self.shape(x), self.shape(w)));
        }
        let mut out = kernels::matmul_nt(self.value(x).data(), self.value(w).data(), rows, fan_in, fan_out);
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.shape() != [fan_out] {
                return Err(mismatch("linear bias", self.shape(w), bias.shape()));
            }
            for row in out.chunks_mut(fan_out) {
                for (o, &bv) in row.iter_mut().zip(bias.data()) {
                    *o = *o + bv;
                }
            }
        }
        let t = Tensor::new(vec![rows, fan_out], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.derived(t, Op::Linear { x, w, b }, &inputs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        rank2("transpose", self.value(a))?;
        let t = self.value(a).transpose2();
        Ok(self.derived(t, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.derived(t, Op::Reshape(a), &[a]))
    }

    // ---------------------------------------------------------------- elementwise

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.derived(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.derived(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.derived(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("div", a, b, |x, y| x / y)?;
        Ok(self.derived(t, Op::Div(a, b), &[a, b]))
    }

    /// Adds a vector of length `n` to every trailing row of length `n`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let n = *ta.shape().last().unwrap_or(&0);
        if tr.shape() != [n] {
            return Err(mismatch("add_row", ta.shape(), tr.shape()));
        }
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (o, &r) in chunk.iter_mut().zip(tr.data()) {
                *o = *o + r;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.derived(t, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let t = self.value(a).map(|x| x * s);
        self.derived(t, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: F) -> Var {
        let t = self.value(a).map(|x| x + s);
        self.derived(t, Op::AddScalar(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(kernels::sigmoid);
        self.derived(t, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.tanh());
        self.derived(t, Op::Tanh(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(kernels::gelu);
        self.derived(t, Op::Gelu(a), &[a])
    }

    /// Square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.sqrt());
        self.derived(t, Op::Sqrt(a), &[a])
    }

    // ---------------------------------------------------------------- normalization

    /// Softmax along `axis`, stabilized by subtracting the running maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(Error::AxisOutOfRange {
                op: "softmax",
                axis,
                rank: tx.rank(),
            });
        }
        let (outer, len, inner) = split_around(tx.shape(), axis);
        let src = tx.data();
        let mut out = vec![F::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let mut max = F::neg_infinity();
                for k in 0..len {
                    max = max.max(src[idx(k)]);
                }
                let mut total = F::zero();
                for k in 0..len {
                    let e = (src[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    total = total + e;
                }
                for k in 0..len {
                    out[idx(k)] = out[idx(k)] / total;
                }
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.derived(t, Op::Softmax { x, axis }, &[x]))
    }

    /// Normalizes each row over the trailing axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        if eps <= F::zero() {
            return Err(Error::invalid("layer_norm", "eps must be positive"));
        }
        let tx = self.value(x);
        let d = *tx.shape().last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(mismatch("layer_norm", tx.shape(), self.shape(gamma)));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let dn = F::lit(d as f64);
        let rows = tx.numel() / d.max(1);
        let mut xhat = vec![F::zero(); tx.numel()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().fold(F::zero(), |a, &v| a + v) / dn;
            let var = row.iter().fold(F::zero(), |a, &v| a + (v - mean) * (v - mean)) / dn;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.derived(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    // ---------------------------------------------------------------- shape

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::AxisOutOfRange {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_around(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.derived(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(Error::AxisOutOfRange {
                op: "slice",
                axis,
                rank: tx.rank(),
            });
        }
        if start + len > tx.shape()[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{} exceeds axis {axis} of {:?}", start + len, tx.shape()),
            ));
        }
        let (outer, full, inner) = split_around(tx.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&tx.data()[base..base + len * inner]);
        }
        let mut shape = tx.shape().to_vec();
        shape[axis] = len;
        let t = Tensor::new(shape, out)?;
        Ok(self.derived(t, Op::Slice { x, axis, start }, &[x]))
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let total: usize = sizes.iter().sum();
        let have = self.shape(x).get(axis).copied().unwrap_or(0);
        if total != have {
            return Err(Error::invalid(
                "split",
                format!("sizes sum to {total}, axis {axis} has length {have}"),
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice(x, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        self.derived(t, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a);
        self.scale(s, F::one() / F::lit(n as f64))
    }

    /// Sums over `axis`, removing it from the shape (a rank-1 input yields a
    /// one-element tensor).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(Error::AxisOutOfRange {
                op: "sum_axis",
                axis,
                rank: tx.rank(),
            });
        }
        let (outer, len, inner) = split_around(tx.shape(), axis);
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &tx.data()[(o * len + k) * inner..(o * len + k + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        let mut shape: Vec<usize> = tx.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.derived(t, Op::SumAxis { x, axis }, &[x]))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `logits[batch×classes]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, classes) = tl.dims2();
        if rows != labels.len() {
            return Err(Error::invalid(
                "cross_entropy",
                format!("{rows} logit rows but {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(
                "cross_entropy",
                format!("label {bad} out of range for {classes} classes"),
            ));
        }
        let mut probs = vec![F::zero(); rows * classes];
        let mut loss = F::zero();
        for r in 0..rows {
            let row = tl.row(r);
            let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let total = row.iter().fold(F::zero(), |a, &v| a + (v - max).exp());
            let lse = max + total.ln();
            loss = loss + (lse - row[labels[r]]);
            for c in 0..classes {
                probs[r * classes + c] = (row[c] - lse).exp();
            }
        }
        let t = Tensor::scalar(loss / F::lit(rows.max(1) as f64));
        Ok(self.derived(
            t,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Cosine similarity of corresponding rows of `a` and `b` over the
    /// trailing axis. A row with zero norm on either side yields cosine 0
    /// and no gradient.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("row_cosine", ta.shape(), tb.shape()));
        }
        let (rows, d) = ta.dims2();
        let mut na = vec![F::zero(); rows];
        let mut nb = vec![F::zero(); rows];
        let mut out = vec![F::zero(); rows];
        let mut degenerate = 0usize;
        for r in 0..rows {
            let (x, y) = (ta.row(r), tb.row(r));
            let mut dot = F::zero();
            let mut sx = F::zero();
            let mut sy = F::zero();
            for j in 0..d {
                dot = dot + x[j] * y[j];
                sx = sx + x[j] * x[j];
                sy = sy + y[j] * y[j];
            }
            na[r] = sx.sqrt();
            nb[r] = sy.sqrt();
            if na[r] > F::zero() && nb[r] > F::zero() {
                out[r] = dot / (sx * sy).sqrt();
            } else {
                degenerate += 1;
            }
        }
        if degenerate > 0 {
            log::debug!("row_cosine: {degenerate} zero-norm rows treated as cosine 0");
        }
        let t = Tensor::new(vec![rows], out)?;
        Ok(self.derived(t, Op::RowCosine { a, b, na, nb }, &[a, b]))
    }

    // ---------------------------------------------------------------- backward

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss), F::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every trainable parameter leaf that received one.
    pub fn param_grads(&self) -> Vec<(ParamId, &Tensor<F>)> {
        let mut out: Vec<(ParamId, &Tensor<F>)> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn propagate(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| -> &Tensor<F> { &self.nodes[v.0].value };
        let mut acc = |v: Var, t: Tensor<F>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2();
                let n = val(*b).dims2().1;
                let da = kernels::matmul_nt(gd, val(*b).data(), m, n, k);
                let db = kernels::matmul_tn(val(*a).data(), gd, m, k, n);
                acc(*a, Tensor::new(vec![m, k], da).expect("shape"));
                acc(*b, Tensor::new(vec![k, n], db).expect("shape"));
            }
            Op::Linear { x, w, b } => {
                let (rows, fan_in) = val(*x).dims2();
                let fan_out = val(*w).dims2().0;
                if self.nodes[x.0].requires_grad {
                    let dx = kernels::matmul(gd, val(*w).data(), rows, fan_out, fan_in);
                    acc(*x, Tensor::new(vec![rows, fan_in], dx).expect("shape"));
                }
                if self.nodes[w.0].requires_grad {
                    let dw = kernels::matmul_tn(gd, val(*x).data(), rows, fan_out, fan_in);
                    acc(*w, Tensor::new(vec![fan_out, fan_in], dw).expect("shape"));
                }
                if let Some(b) = b {
                    let mut db = vec![F::zero(); fan_out];
                    for row in gd.chunks(fan_out) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    acc(*b, Tensor::new(vec![fan_out], db).expect("shape"));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, r) => {
                acc(*a, g.clone());
                let n = val(*r).numel();
                let mut dr = vec![F::zero(); n];
                for chunk in gd.chunks(n) {
                    for (d, &v) in dr.iter_mut().zip(chunk) {
                        *d = *d + v;
                    }
                }
                acc(*r, Tensor::new(vec![n], dr).expect("shape"));
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, zip_map(g, tb, |gv, y| gv * y));
                acc(*b, zip_map(g, ta, |gv, x| gv * x));
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, zip_map(g, tb, |gv, y| gv / y));
                let db: Vec<F> = gd
                    .iter()
                    .zip(ta.data().iter().zip(tb.data()))
                    .map(|(&gv, (&x, &y))| -gv * x / (y * y))
                    .collect();
                acc(*b, Tensor::new(tb.shape().to_vec(), db).expect("shape"));
            }
            Op::Scale(a, s) => acc(*a, g.map(|v| v * *s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Sigmoid(a) => {
                acc(*a, zip_map(g, &node.value, |gv, y| gv * y * (F::one() - y)));
            }
            Op::Tanh(a) => {
                acc(*a, zip_map(g, &node.value, |gv, y| gv * (F::one() - y * y)));
            }
            Op::Gelu(a) => {
                acc(*a, zip_map(g, val(*a), |gv, x| gv * kernels::gelu_grad(x)));
            }
            Op::Sqrt(a) => {
                let half = F::lit(0.5);
                acc(
                    *a,
                    zip_map(g, &node.value, |gv, y| {
                        if y > F::zero() {
                            gv * half / y
                        } else {
                            F::zero()
                        }
                    }),
                );
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, len, inner) = split_around(y.shape(), *axis);
                let mut dx = vec![F::zero(); y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let mut dot = F::zero();
                        for k in 0..len {
                            dot = dot + gd[idx(k)] * y.data()[idx(k)];
                        }
                        for k in 0..len {
                            dx[idx(k)] = y.data()[idx(k)] * (gd[idx(k)] - dot);
                        }
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), dx).expect("shape"));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = val(*gamma).data();
                let d = gam.len();
                let rows = rstd.len();
                let dn = F::lit(d as f64);
                let mut dx = vec![F::zero(); rows * d];
                let mut dgamma = vec![F::zero(); d];
                let mut dbeta = vec![F::zero(); d];
                for r in 0..rows {
                    let gr = &gd[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mut m1 = F::zero();
                    let mut m2 = F::zero();
                    for j in 0..d {
                        let dxh = gr[j] * gam[j];
                        m1 = m1 + dxh;
                        m2 = m2 + dxh * xr[j];
                        dgamma[j] = dgamma[j] + gr[j] * xr[j];
                        dbeta[j] = dbeta[j] + gr[j];
                    }
                    m1 = m1 / dn;
                    m2 = m2 / dn;
                    for j in 0..d {
                        let dxh = gr[j] * gam[j];
                        dx[r * d + j] = rstd[r] * (dxh - m1 - xr[j] * m2);
                    }
                }
                acc(*x, Tensor::new(val(*x).shape().to_vec(), dx).expect("shape"));
                acc(*gamma, Tensor::new(vec![d], dgamma).expect("shape"));
                acc(*beta, Tensor::new(vec![d], dbeta).expect("shape"));
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_around(g.shape(), *axis);
                let total = g.shape()[*axis];
                let mut offset = 0;
                for &p in parts {
                    let ps = val(p).shape().to_vec();
                    let len = ps[*axis];
                    let mut dp = Vec::with_capacity(val(p).numel());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        dp.extend_from_slice(&gd[base..base + len * inner]);
                    }
                    acc(p, Tensor::new(ps, dp).expect("shape"));
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = val(*x).shape().to_vec();
                let (outer, full, inner) = split_around(&xs, *axis);
                let len = g.shape()[*axis];
                let mut dx = vec![F::zero(); val(*x).numel()];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    dx[base..base + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, Tensor::new(xs, dx).expect("shape"));
            }
            Op::Transpose(a) => acc(*a, g.transpose2()),
            Op::Reshape(a) => {
                let s = val(*a).shape().to_vec();
                acc(*a, g.clone().reshape(&s).expect("shape"));
            }
            Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape(), gd[0])),
            Op::SumAxis { x, axis } => {
                let xs = val(*x).shape().to_vec();
                let (outer, len, inner) = split_around(&xs, *axis);
                let mut dx = vec![F::zero(); val(*x).numel()];
                for o in 0..outer {
                    for k in 0..len {
                        dx[(o * len + k) * inner..(o * len + k + 1) * inner]
                            .copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                acc(*x, Tensor::new(xs, dx).expect("shape"));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let shape = val(*logits).shape().to_vec();
                let classes = probs.len() / labels.len().max(1);
                let scale = gd[0] / F::lit(labels.len().max(1) as f64);
                let mut dl: Vec<F> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dl[r * classes + l] = dl[r * classes + l] - scale;
                }
                acc(*logits, Tensor::new(shape, dl).expect("shape"));
            }
            Op::RowCosine { a, b, na, nb } => {
                let (ta, tb) = (val(*a), val(*b));
                let (rows, d) = ta.dims2();
                let cos = node.value.data();
                let mut da = vec![F::zero(); rows * d];
                let mut db = vec![F::zero(); rows * d];
                for r in 0..rows {
                    if na[r] <= F::zero() || nb[r] <= F::zero() {
                        continue;
                    }
                    let inv = F::one() / (na[r] * nb[r]);
                    let (x, y) = (ta.row(r), tb.row(r));
                    for j in 0..d {
                        da[r * d + j] = gd[r] * (y[j] * inv - cos[r] * x[j] / (na[r] * na[r]));
                        db[r * d + j] = gd[r] * (x[j] * inv - cos[r] * y[j] / (nb[r] * nb[r]));
                    }
                }
                acc(*a, Tensor::new(ta.shape().to_vec(), da).expect("shape"));
                acc(*b, Tensor::new(tb.shape().to_vec(), db).expect("shape"));
            }
        }
    }
}

fn zip_map<F: Real>(g: &Tensor<F>, other: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let data = g
        .data()
        .iter()
        .zip(other.data())
        .map(|(&a, &b)| f(a, b))
        .collect();
    Tensor::new(g.shape().to_vec(), data).expect("shape")
}

#[cfg(test)]
mod tests;
