//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! A [`Tape`] records every operation in execution order, so node ids are a
//! topological order by construction. [`Tape::backward`] walks the nodes once
//! in reverse and accumulates gradients additively at fan-out. Nodes whose
//! inputs never require a gradient are not visited at all, which is what keeps
//! frozen-backbone fine-tuning cheap: no weight gradients are formed for
//! frozen matrices.
//!
//! Leaves can borrow their value (`leaf_ref`, `constant`) so binding a model's
//! parameters to a fresh tape costs no copies.

use std::borrow::Cow;

use crate::error::{bail, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Map { x: usize, deriv: Vec<f64> },
    Clamp { x: usize, lo: f64, hi: f64 },
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Transpose(usize),
    Reshape(usize),
    SliceCols { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    GatherRows { x: usize, rows: Vec<usize> },
    Stack(Vec<usize>),
    Sum(usize),
    Mean(usize),
    Kron(usize, usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to the tape's leaves.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` if the leaf was not tracked or unreached.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

fn same_or_scalar(a: &Tensor, b: &Tensor, what: &str) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.is_scalar() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else {
        bail!(
            Shape,
            "{what}: shapes {:?} and {:?} are not broadcast-compatible",
            a.shape(),
            b.shape()
        )
    }
}

/// Broadcast-aware binary map for same-shape or scalar operands.
fn zip_broadcast(a: &Tensor, b: &Tensor, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let n: usize = shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let data = (0..n)
        .map(|i| {
            let x = if ad.len() == 1 { ad[0] } else { ad[i] };
            let y = if bd.len() == 1 { bd[0] } else { bd[i] };
            f(x, y)
        })
        .collect();
    Tensor::new(shape, data).expect("broadcast shape")
}

/// Accumulates `g` (shaped like the op output) into a parent's buffer,
/// summing over the broadcast when the parent is a scalar.
fn acc_broadcast(buf: &mut [f64], g: &[f64], scale: impl Fn(usize) -> f64) {
    if buf.len() == 1 && g.len() != 1 {
        buf[0] += g.iter().enumerate().map(|(i, gi)| gi * scale(i)).sum::<f64>();
    } else {
        for (i, (b, gi)) in buf.iter_mut().zip(g).enumerate() {
            *b += gi * scale(i);
        }
    }
}

fn bcast(d: &[f64], i: usize) -> f64 {
    if d.len() == 1 {
        d[0]
    } else {
        d[i]
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[usize]) -> Var {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf_ref(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: &'a Tensor) -> Var {
        self.leaf_ref(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let shape = same_or_scalar(x, y, "add")?;
        let out = zip_broadcast(x, y, shape, |p, q| p + q);
        Ok(self.push(out, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let shape = same_or_scalar(x, y, "sub")?;
        let out = zip_broadcast(x, y, shape, |p, q| p - q);
        Ok(self.push(out, Op::Sub(a.0, b.0), &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let shape = same_or_scalar(x, y, "mul")?;
        let out = zip_broadcast(x, y, shape, |p, q| p * q);
        Ok(self.push(out, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    /// Row-wise bias addition: `x [m×d] + b [d]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let (m, d) = xv.dims2()?;
        if bv.numel() != d {
            bail!(
                Shape,
                "bias of shape {:?} does not match rows of {:?}",
                bv.shape(),
                xv.shape()
            );
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, bias) in row.iter_mut().zip(bv.data()) {
                *v += bias;
            }
        }
        let out = Tensor::new(vec![m, d], data)?;
        Ok(self.push(out, Op::AddBias(x.0, b.0), &[x.0, b.0]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x.0, c), &[x.0])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(x.0), &[x.0])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x.0), &[x.0])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp(x.0), &[x.0])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if let Some(bad) = xv.data().iter().find(|&&v| v <= 0.0) {
            bail!(Domain, "log of non-positive input {bad}");
        }
        let out = xv.map(f64::ln);
        Ok(self.push(out, Op::Log(x.0), &[x.0]))
    }

    /// Custom elementwise function with a caller-supplied derivative.
    pub fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> Var {
        let xv = self.value(x);
        let out = xv.map(&f);
        let deriv = xv.data().iter().map(|&v| df(v)).collect();
        self.push(out, Op::Map { x: x.0, deriv }, &[x.0])
    }

    /// Clamps into `[lo, hi]`; the gradient passes only strictly inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(out, Op::Clamp { x: x.0, lo, hi }, &[x.0])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax_rows(x, None)
    }

    /// Row softmax with max subtraction. Columns where `keep[j]` is false get
    /// probability exactly zero, as if their logits were −∞.
    pub fn masked_softmax_rows(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2()?;
        if let Some(k) = keep {
            if k.len() != n {
                bail!(Shape, "softmax mask of length {} for {n} columns", k.len());
            }
        }
        let live = |j: usize| keep.is_none_or(|k| k[j]);
        let mut data = vec![0.0; m * n];
        for (row_in, row_out) in xv.data().chunks(n).zip(data.chunks_mut(n)) {
            let max = (0..n)
                .filter(|&j| live(j))
                .map(|j| row_in[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..n {
                if live(j) {
                    let e = (row_in[j] - max).exp();
                    row_out[j] = e;
                    total += e;
                }
            }
            for v in row_out.iter_mut() {
                *v /= total;
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::Softmax(x.0), &[x.0]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            bail!(Contract, "layer_norm eps must be positive, got {eps}");
        }
        let xv = self.value(x);
        let (m, d) = xv.dims2()?;
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.numel() != d || bv.numel() != d {
            bail!(
                Shape,
                "layer_norm affine shapes {:?}/{:?} for width {d}",
                gv.shape(),
                bv.shape()
            );
        }
        let mut xhat = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        let mut data = vec![0.0; m * d];
        for r in 0..m {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                data[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(vec![m, d], data)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
            &[x.0, gamma.0, beta.0],
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        Ok(self.push(out, Op::Transpose(x.0), &[x.0]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x.0), &[x.0]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2()?;
        if len == 0 || start + len > n {
            bail!(Shape, "column slice {start}..{} out of {n}", start + len);
        }
        let mut data = Vec::with_capacity(m * len);
        for row in xv.data().chunks(n) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::new(vec![m, len], data)?;
        Ok(self.push(out, Op::SliceCols { x: x.0, start }, &[x.0]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            bail!(Shape, "concat_cols needs at least one input");
        };
        let m = self.value(*first).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = self.value(*p).dims2()?;
            if r != m {
                bail!(Shape, "concat_cols row mismatch: {r} vs {m}");
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; m * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let src = self.value(*p).data();
            for r in 0..m {
                data[r * total + offset..r * total + offset + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let out = Tensor::new(vec![m, total], data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(out, Op::ConcatCols(ids.clone()), &ids))
    }

    /// Row gather (embedding lookup, readout). Rows may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2()?;
        if rows.is_empty() {
            bail!(Shape, "gather_rows needs at least one row");
        }
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                bail!(Shape, "row {r} out of range for {m} rows");
            }
            data.extend_from_slice(xv.row(r));
        }
        let out = Tensor::new(vec![rows.len(), n], data)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                x: x.0,
                rows: rows.to_vec(),
            },
            &[x.0],
        ))
    }

    /// Stacks single-element tensors into a vector.
    pub fn stack(&mut self, items: &[Var]) -> Result<Var> {
        if items.is_empty() {
            bail!(Shape, "stack needs at least one input");
        }
        let mut data = Vec::with_capacity(items.len());
        for v in items {
            let t = self.value(*v);
            if !t.is_scalar() {
                bail!(Shape, "stack expects scalars, got {:?}", t.shape());
            }
            data.push(t.item());
        }
        let ids: Vec<usize> = items.iter().map(|v| v.0).collect();
        Ok(self.push(Tensor::vector(data), Op::Stack(ids.clone()), &ids))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x.0), &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x.0), &[x.0])
    }

    /// Kronecker product of two matrices.
    pub fn kron(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kron(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Kron(a.0, b.0), &[a.0, b.0]))
    }

    /// Mean softmax cross-entropy over the rows that carry a target.
    /// Rows with `None` contribute nothing; with no targets the loss is 0.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        let (m, v) = lv.dims2()?;
        if targets.len() != m {
            bail!(Shape, "{} targets for {m} logit rows", targets.len());
        }
        let mut probs = vec![0.0; m * v];
        let mut loss = 0.0;
        let mut count = 0;
        for (r, target) in targets.iter().enumerate() {
            let Some(t) = *target else { continue };
            if t >= v {
                bail!(Shape, "target class {t} out of {v}");
            }
            let row = &lv.data()[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|x| (x - max).exp()).sum();
            for j in 0..v {
                probs[r * v + j] = (row[j] - max).exp() / total;
            }
            loss += total.ln() + max - row[t];
            count += 1;
        }
        let value = if count == 0 { 0.0 } else { loss / count as f64 };
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits.0],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            bail!(
                Contract,
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            );
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..n).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                let node = &self.nodes[id];
                match (&node.op, g) {
                    (Op::Leaf, Some(g)) if node.requires_grad => {
                        Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], id: usize) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[id].requires_grad {
            return None;
        }
        let numel = self.nodes[id].value.numel();
        Some(grads[id].get_or_insert_with(|| vec![0.0; numel]))
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let gt = Tensor::new(out.shape().to_vec(), g.to_vec()).expect("grad shape");
                if let Some(buf) = self.buf(grads, *a) {
                    gemm(&gt, false, bv, true, buf, true);
                }
                if let Some(buf) = self.buf(grads, *b) {
                    gemm(av, true, &gt, false, buf, true);
                }
            }
            Op::Add(a, b) => {
                if let Some(buf) = self.buf(grads, *a) {
                    acc_broadcast(buf, g, |_| 1.0);
                }
                if let Some(buf) = self.buf(grads, *b) {
                    acc_broadcast(buf, g, |_| 1.0);
                }
            }
            Op::Sub(a, b) => {
                if let Some(buf) = self.buf(grads, *a) {
                    acc_broadcast(buf, g, |_| 1.0);
                }
                if let Some(buf) = self.buf(grads, *b) {
                    acc_broadcast(buf, g, |_| -1.0);
                }
            }
            Op::Mul(a, b) => {
                let ad = self.nodes[*a].value.data().to_vec();
                let bd = self.nodes[*b].value.data().to_vec();
                if let Some(buf) = self.buf(grads, *a) {
                    acc_broadcast(buf, g, |i| bcast(&bd, i));
                }
                if let Some(buf) = self.buf(grads, *b) {
                    acc_broadcast(buf, g, |i| bcast(&ad, i));
                }
            }
            Op::AddBias(x, b) => {
                if let Some(buf) = self.buf(grads, *x) {
                    for (v, gi) in buf.iter_mut().zip(g) {
                        *v += gi;
                    }
                }
                if let Some(buf) = self.buf(grads, *b) {
                    let d = buf.len();
                    for row in g.chunks(d) {
                        for (v, gi) in buf.iter_mut().zip(row) {
                            *v += gi;
                        }
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(buf) = self.buf(grads, *x) {
                    for (v, gi) in buf.iter_mut().zip(g) {
                        *v += gi * c;
                    }
                }
            }
            Op::Relu(x) => {
                let xd = self.nodes[*x].value.data().to_vec();
                if let Some(buf) = self.buf(grads, *x) {
                    for ((v, gi), xi) in buf.iter_mut().zip(g).zip(&xd) {
                        if *xi > 0.0 {
                            *v += gi;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(buf) = self.buf(grads, *x) {
                    for ((v, gi), y) in buf.iter_mut().zip(g).zip(out.data()) {
                        *v += gi * y * (1.0 - y);
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(buf) = self.buf(grads, *x) {
                    for ((v, gi), y) in buf.iter_mut().zip(g).zip(out.data()) {
                        *v += gi * y;
                    }
                }
            }
            Op::Log(x) => {
                let xd = self.nodes[*x].value.data().to_vec();
                if let Some(buf) = self.buf(grads, *x) {
                    for ((v, gi), xi) in buf.iter_mut().zip(g).zip(&xd) {
                        *v += gi / xi;
                    }
                }
            }
            Op::Map { x, deriv } => {
                if let Some(buf) = self.buf(grads, *x) {
                    for ((v, gi), di) in buf.iter_mut().zip(g).zip(deriv) {
                        *v += gi * di;
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xd = self.nodes[*x].value.data().to_vec();
                if let Some(buf) = self.buf(grads, *x) {
                    for ((v, gi), xi) in buf.iter_mut().zip(g).zip(&xd) {
                        if *xi > *lo && *xi < *hi {
                            *v += gi;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let n = out.cols();
                if let Some(buf) = self.buf(grads, *x) {
                    for ((brow, grow), yrow) in buf.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            brow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = out.cols();
                let gv = self.nodes[*gamma].value.data().to_vec();
                if let Some(buf) = self.buf(grads, *gamma) {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            buf[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(buf) = self.buf(grads, *beta) {
                    for grow in g.chunks(d) {
                        for j in 0..d {
                            buf[j] += grow[j];
                        }
                    }
                }
                if let Some(buf) = self.buf(grads, *x) {
                    for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let dh: Vec<f64> = (0..d).map(|j| grow[j] * gv[j]).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            buf[r * d + j] += inv_std[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (out.rows(), out.cols());
                if let Some(buf) = self.buf(grads, *x) {
                    // out is r×c, input is c×r
                    for i in 0..r {
                        for j in 0..c {
                            buf[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(buf) = self.buf(grads, *x) {
                    for (v, gi) in buf.iter_mut().zip(g) {
                        *v += gi;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let n = self.nodes[*x].value.cols();
                let w = out.cols();
                if let Some(buf) = self.buf(grads, *x) {
                    for (brow, grow) in buf.chunks_mut(n).zip(g.chunks(w)) {
                        for (v, gi) in brow[*start..*start + w].iter_mut().zip(grow) {
                            *v += gi;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p].value.cols();
                    if let Some(buf) = self.buf(grads, p) {
                        for (brow, grow) in buf.chunks_mut(w).zip(g.chunks(total)) {
                            for (v, gi) in brow.iter_mut().zip(&grow[offset..offset + w]) {
                                *v += gi;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::GatherRows { x, rows } => {
                let n = out.cols();
                if let Some(buf) = self.buf(grads, *x) {
                    for (t, &r) in rows.iter().enumerate() {
                        for j in 0..n {
                            buf[r * n + j] += g[t * n + j];
                        }
                    }
                }
            }
            Op::Stack(items) => {
                for (i, &p) in items.iter().enumerate() {
                    if let Some(buf) = self.buf(grads, p) {
                        buf[0] += g[i];
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(buf) = self.buf(grads, *x) {
                    for v in buf.iter_mut() {
                        *v += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if let Some(buf) = self.buf(grads, *x) {
                    let scale = g[0] / buf.len() as f64;
                    for v in buf.iter_mut() {
                        *v += scale;
                    }
                }
            }
            Op::Kron(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (p, q) = (av.rows(), av.cols());
                let (r, s) = (bv.rows(), bv.cols());
                let width = q * s;
                let ad = av.data().to_vec();
                let bd = bv.data().to_vec();
                if let Some(buf) = self.buf(grads, *a) {
                    for i in 0..p {
                        for j in 0..q {
                            let mut acc = 0.0;
                            for k in 0..r {
                                for l in 0..s {
                                    acc += g[(i * r + k) * width + j * s + l] * bd[k * s + l];
                                }
                            }
                            buf[i * q + j] += acc;
                        }
                    }
                }
                if let Some(buf) = self.buf(grads, *b) {
                    for k in 0..r {
                        for l in 0..s {
                            let mut acc = 0.0;
                            for i in 0..p {
                                for j in 0..q {
                                    acc += g[(i * r + k) * width + j * s + l] * ad[i * q + j];
                                }
                            }
                            buf[k * s + l] += acc;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let v = self.nodes[*logits].value.cols();
                let scale = g[0] / *count as f64;
                if let Some(buf) = self.buf(grads, *logits) {
                    for (r, target) in targets.iter().enumerate() {
                        let Some(t) = *target else { continue };
                        for j in 0..v {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            buf[r * v + j] += scale * (probs[r * v + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Kronecker product `A ⊗ B` of two matrices.
pub fn kron(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (p, q) = a.dims2()?;
    let (r, s) = b.dims2()?;
    let width = q * s;
    let mut data = vec![0.0; p * r * width];
    for i in 0..p {
        for j in 0..q {
            let aij = a.get(i, j);
            for k in 0..r {
                for l in 0..s {
                    data[(i * r + k) * width + j * s + l] = aij * b.get(k, l);
                }
            }
        }
    }
    Tensor::new(vec![p * r, width], data)
}

/// Central-difference gradient check.
///
/// Builds `f` on a fresh tape with `params` as tracked leaves, differentiates
/// it, then re-evaluates `f` at `θ ± h·e_i` for every coordinate. Returns the
/// largest `|analytic − numeric| / max(1, |numeric|)`.
pub fn finite_difference_check<'a, F>(params: &[Tensor], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape<'a>, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        bail!(Contract, "finite-difference step {h} outside [1e-7, 1e-3]");
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            bail!(Contract, "gradient check objective is not finite ({v})");
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).item().is_finite() {
        bail!(Contract, "gradient check objective is not finite");
    }
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(params[pi].shape());
        let analytic = grads.get(*var).unwrap_or(&zeros).clone();
        for i in 0..params[pi].numel() {
            let orig = params[pi].data()[i];
            work[pi].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[pi].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{init_params, InitScheme};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let x = t(&[3], &[0.5, -1.0, 2.0]);
        let mut tape = Tape::new();
        let v = tape.leaf_ref(&x, true);
        let loss = tape.sum(v);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let x = t(&[2], &[1.0, 2.0]);
        let mut tape = Tape::new();
        let v = tape.leaf_ref(&x, true);
        let sq = tape.mul(v, v).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn fan_out_accumulates_exactly() {
        let x = init_params(&[4], InitScheme::XavierUniform, 3);
        let mut tape = Tape::new();
        let v = tape.leaf_ref(&x, true);
        let y = tape.add(v, v).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[2.0; 4]);
    }

    #[test]
    fn untracked_leaves_get_no_gradient() {
        let x = t(&[2], &[1.0, 2.0]);
        let w = t(&[2], &[3.0, 4.0]);
        let mut tape = Tape::new();
        let xv = tape.leaf_ref(&x, true);
        let wv = tape.constant(&w);
        let p = tape.mul(xv, wv).unwrap();
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(wv).is_none());
        assert_eq!(g.get(xv).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = t(&[2], &[1.0, 2.0]);
        let mut tape = Tape::new();
        let v = tape.leaf_ref(&x, true);
        let y = tape.relu(v);
        assert!(matches!(
            tape.backward(y),
            Err(crate::error::LabError::Contract(_))
        ));
    }

    #[test]
    fn relu_values_and_zero_subgradient() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        let mut tape = Tape::new();
        let v = tape.leaf_ref(&x, true);
        let y = tape.relu(v);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sigmoid_at_zero_and_its_slope() {
        let x = Tensor::scalar(0.0);
        let mut tape = Tape::new();
        let v = tape.leaf_ref(&x, true);
        let y = tape.sigmoid(v);
        assert_eq!(tape.value(y).item(), 0.5);
        let analytic = tape.backward(y).unwrap().get(v).unwrap().item();
        let h = 1e-5;
        let numeric = (sigmoid(h) - sigmoid(-h)) / (2.0 * h);
        assert!((numeric - 0.25).abs() < 1e-8);
        assert!((analytic - numeric).abs() < 1e-8);
    }

    #[test]
    fn log_rejects_non_positive() {
        let x = t(&[2], &[1.0, 0.0]);
        let mut tape = Tape::new();
        let v = tape.leaf_ref(&x, false);
        assert!(matches!(tape.log(v), Err(crate::error::LabError::Domain(_))));
    }

    #[test]
    fn softmax_examples() {
        let x = Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]);
        let y = Tensor::from_rows(&[vec![1f64.ln(), 3f64.ln()]]);
        let z = Tensor::from_rows(&[vec![1000.0, 0.0]]);
        let mut tape = Tape::new();
        let (a, b, c) = (tape.constant(&x), tape.constant(&y), tape.constant(&z));
        let sa = tape.softmax_rows(a).unwrap();
        let sb = tape.softmax_rows(b).unwrap();
        let sc = tape.softmax_rows(c).unwrap();
        for v in tape.value(sa).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let pb = tape.value(sb).data();
        assert!((pb[0] - 0.25).abs() < 1e-15 && (pb[1] - 0.75).abs() < 1e-15);
        let pc = tape.value(sc).data();
        assert!(pc.iter().all(|v| v.is_finite()));
        assert!((pc[0] - 1.0).abs() < 1e-15 && pc[1] < 1e-300);
    }

    #[test]
    fn masked_softmax_zeroes_dropped_columns() {
        let x = Tensor::from_rows(&[vec![0.3, 5.0, -1.0]]);
        let mut tape = Tape::new();
        let v = tape.constant(&x);
        let s = tape.masked_softmax_rows(v, Some(&[true, false, true])).unwrap();
        let p = tape.value(s).data();
        assert_eq!(p[1], 0.0);
        assert!((p[0] + p[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::from_rows(&[vec![3.0; 5]]);
        let (g, b) = (Tensor::ones(&[5]), Tensor::zeros(&[5]));
        let mut tape = Tape::new();
        let (xv, gv, bv) = (tape.constant(&x), tape.constant(&g), tape.constant(&b));
        let y = tape.layer_norm(xv, gv, bv, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_is_nearly_idempotent_for_small_eps() {
        let x = init_params(&[4, 6], InitScheme::XavierUniform, 9);
        let (g, b) = (Tensor::ones(&[6]), Tensor::zeros(&[6]));
        let mut tape = Tape::new();
        let (xv, gv, bv) = (tape.constant(&x), tape.constant(&g), tape.constant(&b));
        let once = tape.layer_norm(xv, gv, bv, 1e-12).unwrap();
        let twice = tape.layer_norm(once, gv, bv, 1e-12).unwrap();
        assert!(tape.value(once).max_abs_diff(tape.value(twice)) < 1e-9);
    }

    #[test]
    fn kron_direct_example() {
        let a = Tensor::from_rows(&[vec![2.0]]);
        let b = Tensor::from_rows(&[vec![1.0, 3.0]]);
        assert_eq!(kron(&a, &b).unwrap().data(), &[2.0, 6.0]);
    }

    #[test]
    fn cross_entropy_without_targets_is_zero_with_zero_grad() {
        let x = init_params(&[3, 4], InitScheme::XavierUniform, 1);
        let mut tape = Tape::new();
        let v = tape.leaf_ref(&x, true);
        let l = tape.cross_entropy_rows(v, &[None, None, None]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let g = tape.backward(l).unwrap();
        assert!(g.get(v).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn gradcheck_rejects_bad_step() {
        let p = [Tensor::scalar(1.0)];
        let r = finite_difference_check(&p, 0.1, |tape, v| Ok(tape.sum(v[0])));
        assert!(r.is_err());
    }

    #[test]
    fn gradcheck_linear_is_exact() {
        let w = init_params(&[3, 2], InitScheme::XavierUniform, 5);
        let x = init_params(&[4, 3], InitScheme::XavierUniform, 6);
        let err = finite_difference_check(&[w], 1e-4, |tape, v| {
            let xv = tape.leaf(x.clone(), false);
            let y = tape.matmul(xv, v[0])?;
            Ok(tape.sum(y))
        })
        .unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn gradcheck_catches_corrupted_rule() {
        let x = init_params(&[5], InitScheme::XavierUniform, 8);
        let err = finite_difference_check(&[x], 1e-5, |tape, v| {
            // d/dx sin(x) deliberately reported as sin(x)
            let y = tape.map(v[0], f64::sin, f64::sin);
            let y = tape.mul(y, y)?;
            Ok(tape.sum(y))
        })
        .unwrap();
        assert!(err > 1e-2, "{err}");
    }

    #[test]
    fn nonfinite_objective_fails_check() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let r = finite_difference_check(&[x], 1e-5, |tape, v| {
            let y = tape.map(v[0], |_| f64::NAN, |_| 0.0);
            Ok(tape.sum(y))
        });
        assert!(r.is_err());
    }
}
