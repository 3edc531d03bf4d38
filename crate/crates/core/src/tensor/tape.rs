use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{ParamId, ParamStore, Precision, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    /// `b` is a row vector repeated over every row of `a`.
    Row,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize, Bcast),
    Sub(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    Div(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    Sigmoid(usize),
    Relu(usize),
    Abs(usize),
    Min(usize, usize),
    Max(usize, usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MeanAxis {
        x: usize,
        axis: usize,
    },
    Sum(usize),
    Mean(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    GatherRows {
        x: usize,
        idx: Vec<usize>,
    },
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Wengert list of recorded operations. Nodes are appended in evaluation
/// order, so reverse index order is a valid topological order for backward.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    precision: Precision,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    param_order: Vec<ParamId>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::with_precision(Precision::F64)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            precision,
            nodes: Vec::new(),
            params: HashMap::new(),
            param_order: Vec::new(),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are collected iff `t.requires_grad()`.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        if self.precision == Precision::F32 {
            t.data_mut().iter_mut().for_each(|x| *x = Precision::F32.round(*x));
        }
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn variable(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    /// Binds a stored parameter. Binding the same id twice returns the same
    /// node, so a parameter used by several branches accumulates one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id).clone().with_requires_grad(true);
        let v = self.leaf(Tensor {
            grad: None,
            ..t
        });
        self.params.insert(id, v);
        self.param_order.push(id);
        v
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id {
            return Err(Error::Detached);
        }
        self.nodes.get(v.idx).ok_or(Error::Detached)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).expect("var from another tape").value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.numel(), 1, "scalar() on tensor of shape {:?}", t.shape());
        t.data()[0]
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).ok().and_then(|n| n.value.grad())
    }

    /// Gradients of bound parameters, in binding order.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, Option<&[f64]>)> + '_ {
        self.param_order
            .iter()
            .map(move |id| (*id, self.nodes[self.params[id].idx].value.grad()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, mut data: Vec<f64>, op: Op) -> Result<Var> {
        if self.precision == Precision::F32 {
            data.iter_mut().for_each(|x| *x = Precision::F32.round(*x));
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let needs_grad = self.op_needs_grad(&op);
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    fn op_needs_grad(&self, op: &Op) -> bool {
        let ng = |i: &usize| self.nodes[*i].needs_grad;
        match op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::Add(a, b, _)
            | Op::Sub(a, b, _)
            | Op::Mul(a, b, _)
            | Op::Div(a, b)
            | Op::Min(a, b)
            | Op::Max(a, b) => ng(a) || ng(b),
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Shift(x)
            | Op::Sigmoid(x)
            | Op::Relu(x)
            | Op::Abs(x)
            | Op::Softmax(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::MeanAxis { x, .. }
            | Op::SliceCols { x, .. }
            | Op::GatherRows { x, .. } => ng(x),
            Op::LayerNorm { x, gamma, beta, .. } => ng(x) || ng(gamma) || ng(beta),
            Op::CrossEntropy { logits, .. } => ng(logits),
            Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.iter().any(ng),
        }
    }

    fn mat(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = &self.node(v)?.value;
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![0, 0],
            }),
        }
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let sa = self.node(a)?.value.shape();
        let sb = self.node(b)?.value.shape();
        if sa == sb {
            return Ok(Bcast::Same);
        }
        let row_ok = match (sa, sb) {
            ([_, n], [m]) => n == m,
            ([_, n], [1, m]) => n == m,
            _ => false,
        };
        if row_ok {
            Ok(Bcast::Row)
        } else {
            Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat("matmul", a)?;
        let (k2, n) = self.mat("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let out = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul(a.idx, b.idx))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.mat("transpose", x)?;
        let out = transpose(self.value(x).data(), r, c);
        self.push("transpose", vec![c, r], out, Op::Transpose(x.idx))
    }

    // ---- elementwise ----

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl FnOnce(usize, usize, Bcast) -> Op,
    ) -> Result<Var> {
        let bc = self.bcast(name, a, b)?;
        let ta = self.value(a);
        let tb = self.value(b);
        let n = tb.numel();
        let out: Vec<f64> = match bc {
            Bcast::Same => ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect(),
            Bcast::Row => ta
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| f(*x, tb.data()[i % n]))
                .collect(),
        };
        let shape = ta.shape().to_vec();
        self.push(name, shape, out, mk(a.idx, b.idx, bc))
    }

    /// Elementwise sum; `b` may be a row vector broadcast over `a`'s rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise (Hadamard) product with the same row-broadcast rule as [`Tape::add`].
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("hadamard", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        self.binary("div", a, b, |x, y| x / y, |a, b, _| Op::Div(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("minimum", a, b)?;
        self.binary("minimum", a, b, f64::min, |a, b, _| Op::Min(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("maximum", a, b)?;
        self.binary("maximum", a, b, f64::max, |a, b, _| Op::Max(a, b))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.node(a)?.value.shape();
        let sb = self.node(b)?.value.shape();
        if sa != sb {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = &self.node(x)?.value;
        let out = t.data().iter().map(|v| f(*v)).collect();
        let shape = t.shape().to_vec();
        self.push(name, shape, out, op)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, |v| v * c, Op::Scale(x.idx, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + c, Op::Shift(x.idx))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x.idx))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x.idx))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, f64::abs, Op::Abs(x.idx))
    }

    // ---- reductions and normalizations ----

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.mat("softmax_rows", x)?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push("softmax_rows", vec![r, c], out, Op::Softmax(x.idx))
    }

    /// Row-wise layer normalization with learned scale and shift (both length `cols`).
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.mat("layer_norm_rows", x)?;
        for p in [gamma, beta] {
            let n = self.node(p)?.value.numel();
            if n != c {
                return Err(Error::Shape {
                    op: "layer_norm_rows",
                    lhs: vec![r, c],
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        self.push(
            "layer_norm_rows",
            vec![r, c],
            out,
            Op::LayerNorm {
                x: x.idx,
                gamma: gamma.idx,
                beta: beta.idx,
                xhat,
                inv_std,
            },
        )
    }

    /// Arithmetic mean along `axis`; the axis is dropped from the shape.
    pub fn mean_pool(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.node(x)?.value.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(
                "mean_pool",
                format!("axis {axis} out of range for rank {}", shape.len()),
            ));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xs = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xs[base + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.push("mean_pool", out_shape, out, Op::MeanAxis { x: x.idx, axis })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.node(x)?.value.data().iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(x.idx))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = &self.node(x)?.value;
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", vec![1], vec![s], Op::Mean(x.idx))
    }

    /// Mean over rows of `-log softmax(logits)[i, targets[i]]`.
    pub fn cross_entropy_logits(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.mat("cross_entropy_logits", logits)?;
        if targets.len() != n {
            return Err(Error::Shape {
                op: "cross_entropy_logits",
                lhs: vec![n, v],
                rhs: vec![targets.len()],
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::invalid(
                "cross_entropy_logits",
                format!("target {t} out of range for {v} classes"),
            ));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(v).zip(targets) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_in_place(row);
        }
        loss /= n as f64;
        self.push(
            "cross_entropy_logits",
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits: logits.idx,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    // ---- structural ----

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.mat("slice_cols", x)?;
        if start >= end || end > c {
            return Err(Error::invalid("slice_cols", format!("range {start}..{end} of {c} columns")));
        }
        let xs = self.value(x).data();
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&xs[i * c + start..i * c + end]);
        }
        self.push("slice_cols", vec![r, w], out, Op::SliceCols { x: x.idx, start })
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let dims = xs.iter().map(|v| self.mat("concat_cols", *v)).collect::<Result<Vec<_>>>()?;
        let r = dims.first().ok_or_else(|| Error::invalid("concat_cols", "no inputs"))?.0;
        if let Some(d) = dims.iter().find(|d| d.0 != r) {
            return Err(Error::Shape {
                op: "concat_cols",
                lhs: vec![r],
                rhs: vec![d.0, d.1],
            });
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (v, (_, c)) in xs.iter().zip(&dims) {
                out.extend_from_slice(&self.value(*v).data()[i * c..(i + 1) * c]);
            }
        }
        self.push(
            "concat_cols",
            vec![r, total],
            out,
            Op::ConcatCols(xs.iter().map(|v| v.idx).collect()),
        )
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let dims = xs.iter().map(|v| self.mat("concat_rows", *v)).collect::<Result<Vec<_>>>()?;
        let c = dims.first().ok_or_else(|| Error::invalid("concat_rows", "no inputs"))?.1;
        if let Some(d) = dims.iter().find(|d| d.1 != c) {
            return Err(Error::Shape {
                op: "concat_rows",
                lhs: vec![c],
                rhs: vec![d.0, d.1],
            });
        }
        let total: usize = dims.iter().map(|d| d.0).sum();
        let mut out = Vec::with_capacity(total * c);
        for v in xs {
            out.extend_from_slice(self.value(*v).data());
        }
        self.push(
            "concat_rows",
            vec![total, c],
            out,
            Op::ConcatRows(xs.iter().map(|v| v.idx).collect()),
        )
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.mat("gather_rows", x)?;
        if idx.is_empty() {
            return Err(Error::invalid("gather_rows", "empty index list"));
        }
        if let Some(&i) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::invalid("gather_rows", format!("row {i} out of range for {r} rows")));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&xs[i * c..(i + 1) * c]);
        }
        self.push(
            "gather_rows",
            vec![idx.len(), c],
            out,
            Op::GatherRows {
                x: x.idx,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = &self.node(x)?.value;
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = t.data().to_vec();
        self.push("reshape", shape.to_vec(), data, Op::Reshape(x.idx))
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss. Leaf gradients are added to whatever
    /// earlier passes left there; call [`Tape::zero_grad`] to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = self.node(loss)?;
        if node.value.numel() != 1 {
            return Err(Error::NonScalarLoss(node.value.shape().to_vec()));
        }
        if !node.needs_grad {
            return Err(Error::Detached);
        }
        let nodes = &self.nodes;
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.idx).map(|_| None).collect();
        adj[loss.idx] = Some(vec![1.0]);
        let mut leaf_grads: Vec<(usize, Vec<f64>)> = Vec::new();

        for i in (0..=loss.idx).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let out = node.value.data();
            let mut send = |j: usize, contrib: Vec<f64>| {
                if !nodes[j].needs_grad {
                    return;
                }
                match &mut adj[j] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(contrib),
                }
            };
            let val = |j: usize| nodes[j].value.data();
            match &node.op {
                Op::Leaf => leaf_grads.push((i, g)),
                Op::MatMul(a, b) => {
                    let (m, k) = dims(&nodes[*a].value);
                    let n = nodes[*b].value.shape()[1];
                    if nodes[*a].needs_grad {
                        send(*a, mm_nt(&g, val(*b), m, n, k));
                    }
                    if nodes[*b].needs_grad {
                        send(*b, mm_tn(val(*a), &g, k, m, n));
                    }
                }
                Op::Transpose(x) => {
                    let (r, c) = dims(&nodes[*x].value);
                    send(*x, transpose(&g, c, r));
                }
                Op::Add(a, b, bc) => {
                    let gb = reduce_bcast(&g, *bc, nodes[*b].value.numel());
                    send(*a, g);
                    send(*b, gb);
                }
                Op::Sub(a, b, bc) => {
                    let gb: Vec<f64> = reduce_bcast(&g, *bc, nodes[*b].value.numel())
                        .into_iter()
                        .map(|v| -v)
                        .collect();
                    send(*a, g);
                    send(*b, gb);
                }
                Op::Mul(a, b, bc) => {
                    let (xa, xb) = (val(*a), val(*b));
                    let nb = xb.len();
                    if nodes[*a].needs_grad {
                        let ga = g.iter().enumerate().map(|(i, gv)| gv * xb[i % nb]).collect();
                        send(*a, ga);
                    }
                    if nodes[*b].needs_grad {
                        let prod: Vec<f64> = g.iter().zip(xa).map(|(gv, x)| gv * x).collect();
                        send(*b, reduce_bcast(&prod, *bc, nb));
                    }
                }
                Op::Div(a, b) => {
                    let (xa, xb) = (val(*a), val(*b));
                    send(*a, g.iter().zip(xb).map(|(gv, y)| gv / y).collect());
                    send(
                        *b,
                        g.iter().zip(xa).zip(xb).map(|((gv, x), y)| -gv * x / (y * y)).collect(),
                    );
                }
                Op::Scale(x, c) => send(*x, g.iter().map(|v| v * c).collect()),
                Op::Shift(x) => send(*x, g),
                Op::Sigmoid(x) => send(*x, g.iter().zip(out).map(|(gv, y)| gv * y * (1.0 - y)).collect()),
                Op::Relu(x) => send(
                    *x,
                    g.iter().zip(val(*x)).map(|(gv, v)| if *v > 0.0 { *gv } else { 0.0 }).collect(),
                ),
                Op::Abs(x) => send(
                    *x,
                    g.iter()
                        .zip(val(*x))
                        .map(|(gv, v)| if *v > 0.0 { *gv } else if *v < 0.0 { -gv } else { 0.0 })
                        .collect(),
                ),
                Op::Min(a, b) | Op::Max(a, b) => {
                    let is_min = matches!(node.op, Op::Min(..));
                    let (xa, xb) = (val(*a), val(*b));
                    let mut ga = vec![0.0; g.len()];
                    let mut gb = vec![0.0; g.len()];
                    for i in 0..g.len() {
                        let pick_a = if is_min { xa[i] <= xb[i] } else { xa[i] >= xb[i] };
                        if pick_a {
                            ga[i] = g[i];
                        } else {
                            gb[i] = g[i];
                        }
                    }
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::Softmax(x) => {
                    let c = node.value.shape()[1];
                    let mut gx = vec![0.0; g.len()];
                    for ((gr, yr), dr) in g.chunks(c).zip(out.chunks(c)).zip(gx.chunks_mut(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    send(*x, gx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (r, c) = dims(&node.value);
                    let gam = val(*gamma);
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let mut dx = vec![0.0; r * c];
                    let nf = c as f64;
                    for i in 0..r {
                        let gr = &g[i * c..(i + 1) * c];
                        let hr = &xhat[i * c..(i + 1) * c];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            dgamma[j] += gr[j] * hr[j];
                            dbeta[j] += gr[j];
                            let dh = gr[j] * gam[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        for j in 0..c {
                            let dh = gr[j] * gam[j];
                            dx[i * c + j] = inv_std[i] / nf * (nf * dh - s1 - hr[j] * s2);
                        }
                    }
                    send(*x, dx);
                    send(*gamma, dgamma);
                    send(*beta, dbeta);
                }
                Op::MeanAxis { x, axis } => {
                    let (outer, len, inner) = axis_split(nodes[*x].value.shape(), *axis);
                    let mut gx = vec![0.0; outer * len * inner];
                    let s = 1.0 / len as f64;
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for i in 0..inner {
                                gx[base + i] = g[o * inner + i] * s;
                            }
                        }
                    }
                    send(*x, gx);
                }
                Op::Sum(x) => send(*x, vec![g[0]; nodes[*x].value.numel()]),
                Op::Mean(x) => {
                    let n = nodes[*x].value.numel();
                    send(*x, vec![g[0] / n as f64; n]);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let n = targets.len();
                    let v = probs.len() / n;
                    let s = g[0] / n as f64;
                    let mut gl: Vec<f64> = probs.iter().map(|p| p * s).collect();
                    for (i, &t) in targets.iter().enumerate() {
                        gl[i * v + t] -= s;
                    }
                    send(*logits, gl);
                }
                Op::SliceCols { x, start } => {
                    let (r, c) = dims(&nodes[*x].value);
                    let w = node.value.shape()[1];
                    let mut gx = vec![0.0; r * c];
                    for i in 0..r {
                        gx[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                    }
                    send(*x, gx);
                }
                Op::ConcatCols(xs) => {
                    let (r, total) = dims(&node.value);
                    let mut off = 0;
                    for &x in xs {
                        let c = nodes[x].value.shape()[1];
                        let mut gx = Vec::with_capacity(r * c);
                        for i in 0..r {
                            gx.extend_from_slice(&g[i * total + off..i * total + off + c]);
                        }
                        off += c;
                        send(x, gx);
                    }
                }
                Op::ConcatRows(xs) => {
                    let mut off = 0;
                    for &x in xs {
                        let n = nodes[x].value.numel();
                        send(x, g[off..off + n].to_vec());
                        off += n;
                    }
                }
                Op::GatherRows { x, idx } => {
                    let (r, c) = dims(&nodes[*x].value);
                    let mut gx = vec![0.0; r * c];
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            gx[i * c + j] += g[k * c + j];
                        }
                    }
                    send(*x, gx);
                }
                Op::Reshape(x) => send(*x, g),
            }
        }

        for (i, g) in leaf_grads {
            self.nodes[i].value.accumulate_grad(&g);
        }
        Ok(())
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    let s = t.shape();
    (s[0], s[1])
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduce_bcast(g: &[f64], bc: Bcast, n: usize) -> Vec<f64> {
    match bc {
        Bcast::Same => g.to_vec(),
        Bcast::Row => {
            let mut out = vec![0.0; n];
            for row in g.chunks(n) {
                out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
            }
            out
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

/// `a[m×k] · b[k×n]`
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m×n] · b[k×n]ᵀ` → `m×k`
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    // Row-times-row products do not vectorize; transposing `b` once turns
    // this into the axpy form of `mm`.
    mm(a, &transpose(b, k, n), m, n, k)
}

/// `a[m×k]ᵀ · b[m×n]` → `k×n`
fn mm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}
