//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value and enough saved state
//! to run its vector-Jacobian product. The tape is rebuilt for every step;
//! nodes are only ever appended, so node order is a topological order.

use std::sync::Arc;

use super::kernels;
use super::ops::{self, LAYER_NORM_EPS};
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an op defined outside this module.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    /// Given the output gradient and the input values, return one gradient
    /// per input (same order as recorded), `None` where an input is constant.
    fn backward(&self, grad_out: &[f32], inputs: &[&Tensor], output: &Tensor) -> Vec<Option<Vec<f32>>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddScalarAt(Var, Var, usize),
    Mul(Var, Var),
    MulConst(Var, Arc<[f32]>),
    Scale(Var, f32),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f32>, rstd: Vec<f64> },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    SmoothedCe { logits: Var, probs: Vec<f32>, dist: Vec<(usize, Vec<f32>)> },
    Sum(Var),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records operations for one forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), record: true }
    }

    /// A graph that computes values but never keeps backward state.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), record: false }
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

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    fn needs(&self, v: Var) -> bool {
        self.record && self.nodes[v.0].value.requires_grad
    }

    fn push(&mut self, mut value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op_name(&op).to_string()));
        }
        let rg = inputs.iter().any(|&v| self.needs(v));
        value.requires_grad = rg;
        value.grad = None;
        let op = if rg { op } else { Op::Leaf };
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Insert a tensor; it participates in differentiation iff `requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.grad = None;
        t.requires_grad = t.requires_grad && self.record;
        self.nodes.push(Node { value: t, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims2(ta, "matmul")?;
        let (k2, n) = dims2(tb, "matmul")?;
        if k != k2 {
            return shape_err("matmul", format!("{:?} x {:?}", ta.shape, tb.shape));
        }
        let out = Tensor::matrix(m, n, kernels::gemm_nn(&ta.data, &tb.data, m, k, n))?;
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims2(ta, "matmul_bt")?;
        let (n, k2) = dims2(tb, "matmul_bt")?;
        if k != k2 {
            return shape_err("matmul_bt", format!("{:?} x {:?}ᵀ", ta.shape, tb.shape));
        }
        let out = Tensor::matrix(m, n, kernels::gemm_nt(&ta.data, &tb.data, m, k, n))?;
        self.push(out, Op::MatMulBt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return shape_err("add", format!("{:?} + {:?}", ta.shape, tb.shape));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape.clone(), data)?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// Broadcast-add a length-`cols` vector to every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let c = ta.cols();
        if tr.len() != c {
            return shape_err("add_row", format!("{:?} + row {:?}", ta.shape, tr.shape));
        }
        let data = ta.data.iter().enumerate().map(|(i, x)| x + tr.data[i % c]).collect();
        let out = Tensor::new(ta.shape.clone(), data)?;
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    /// Add element `idx` of `s` to every element of `a`.
    pub fn add_scalar_at(&mut self, a: Var, s: Var, idx: usize) -> Result<Var> {
        let off = match self.value(s).data.get(idx) {
            Some(&v) => v,
            None => return shape_err("add_scalar_at", format!("index {idx} out of range")),
        };
        let ta = self.value(a);
        let out = Tensor::new(ta.shape.clone(), ta.data.iter().map(|x| x + off).collect())?;
        self.push(out, Op::AddScalarAt(a, s, idx), &[a, s])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return shape_err("mul", format!("{:?} * {:?}", ta.shape, tb.shape));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape.clone(), data)?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// Element-wise product with a constant (dropout and drop masks).
    pub fn mul_const(&mut self, a: Var, c: Arc<[f32]>) -> Result<Var> {
        let ta = self.value(a);
        if ta.len() != c.len() {
            return shape_err("mul_const", format!("{:?} vs {} constants", ta.shape, c.len()));
        }
        let data = ta.data.iter().zip(c.iter()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape.clone(), data)?;
        self.push(out, Op::MulConst(a, c), &[a])
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape.clone(), ta.data.iter().map(|x| x * c).collect())?;
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape.clone(), ta.data.iter().map(|x| x.max(0.0)).collect())?;
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape.clone(), ta.data.iter().map(|&x| kernels::sigmoid(x)).collect())?;
        self.push(out, Op::Sigmoid(a), &[a])
    }

    /// Row-wise softmax over the last axis. `visible` has one flag per element.
    pub fn masked_softmax(&mut self, a: Var, visible: Option<&[bool]>) -> Result<Var> {
        let ta = self.value(a);
        if let Some(m) = visible {
            if m.len() != ta.len() {
                return shape_err("masked_softmax", format!("mask of {} for {:?}", m.len(), ta.shape));
            }
        }
        let c = ta.cols();
        let mut out = vec![0.0f32; ta.len()];
        for r in 0..ta.rows() {
            kernels::softmax_row(
                ta.row(r),
                visible.map(|m| &m[r * c..(r + 1) * c]),
                &mut out[r * c..(r + 1) * c],
            );
        }
        let out = Tensor::new(ta.shape.clone(), out)?;
        self.push(out, Op::Softmax(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        let out = ops::layer_norm(tx, &self.value(gain).data, &self.value(bias).data, LAYER_NORM_EPS)?;
        let mut xhat = vec![0.0f32; tx.len()];
        let mut rstds = Vec::with_capacity(tx.rows());
        for r in 0..tx.rows() {
            let row = tx.row(r);
            let (mean, rstd) = ops::row_stats(row, LAYER_NORM_EPS);
            for j in 0..c {
                xhat[r * c + j] = ((row[j] as f64 - mean) * rstd) as f32;
            }
            rstds.push(rstd);
        }
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd: rstds }, &[x, gain, bias])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_cols", "no inputs");
        };
        let rows = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return shape_err("concat_cols", "row counts differ");
            }
            total += t.cols();
        }
        let mut data = vec![0.0f32; rows * total];
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for r in 0..rows {
                data[r * total + off..r * total + off + c].copy_from_slice(t.row(r));
            }
            off += c;
        }
        let out = Tensor::matrix(rows, total, data)?;
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        if start + len > c {
            return shape_err("slice_cols", format!("[{start}, {}) of {c}", start + len));
        }
        let rows = ta.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&ta.row(r)[start..start + len]);
        }
        let out = Tensor::matrix(rows, len, data)?;
        self.push(out, Op::SliceCols(a, start), &[a])
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let c = t.cols();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= t.rows() {
                return shape_err("gather_rows", format!("row {id} of {}", t.rows()));
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::matrix(ids.len(), c, data)?;
        self.push(out, Op::GatherRows(table, ids.to_vec()), &[table])
    }

    /// Summed label-smoothed cross-entropy over rows whose target is `Some`.
    /// The gold class gets `1 − eps`; the rest share `eps` uniformly.
    pub fn smoothed_cross_entropy(&mut self, logits: Var, targets: &[Option<usize>], eps: f32) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, v) = dims2(tl, "smoothed_cross_entropy")?;
        if targets.len() != rows {
            return shape_err("smoothed_cross_entropy", format!("{rows} rows, {} targets", targets.len()));
        }
        let mut probs = vec![0.0f32; rows * v];
        let mut dist = Vec::new();
        let mut total = 0.0f64;
        for (r, tgt) in targets.iter().enumerate() {
            let logp = kernels::log_softmax_row(tl.row(r));
            for j in 0..v {
                probs[r * v + j] = logp[j].exp();
            }
            let Some(g) = *tgt else { continue };
            if g >= v {
                return shape_err("smoothed_cross_entropy", format!("target {g} with {v} classes"));
            }
            let q = smoothed_target(g, v, eps);
            total -= q.iter().zip(&logp).map(|(&qi, &lp)| qi as f64 * lp as f64).sum::<f64>();
            dist.push((r, q));
        }
        let out = Tensor::scalar(total as f32);
        self.push(out, Op::SmoothedCe { logits, probs, dist }, &[logits])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data.iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum(a), &[a])
    }

    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        self.push(output, Op::Custom(inputs.to_vec(), op), inputs)
    }

    /// Populate `grad` on every node that requires it, leaves included.
    /// Reachable-but-unused leaves end up with zero gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = &self.nodes[loss.0].value;
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape.clone()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f32>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            for (input, gin) in self.vjp(i, &g) {
                if !self.needs(input) {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&gin).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(gin),
                }
            }
            self.nodes[i].value.grad = Some(g);
        }
        for node in &mut self.nodes[..n] {
            if node.value.requires_grad && node.value.grad.is_none() {
                node.value.grad = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(())
    }

    fn vjp(&self, i: usize, g: &[f32]) -> Vec<(Var, Vec<f32>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                let mut res = Vec::new();
                if self.needs(*a) {
                    res.push((*a, kernels::gemm_nt(g, &tb.data, m, n, k)));
                }
                if self.needs(*b) {
                    res.push((*b, kernels::gemm_tn(&ta.data, g, m, k, n)));
                }
                res
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[0]);
                let mut res = Vec::new();
                if self.needs(*a) {
                    res.push((*a, kernels::gemm_nn(g, &tb.data, m, n, k)));
                }
                if self.needs(*b) {
                    res.push((*b, kernels::gemm_tn(g, &ta.data, m, n, k)));
                }
                res
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::AddRow(a, row) => {
                let c = out.cols();
                let mut gr = vec![0.0f64; c];
                for (idx, &v) in g.iter().enumerate() {
                    gr[idx % c] += v as f64;
                }
                vec![(*a, g.to_vec()), (*row, gr.into_iter().map(|v| v as f32).collect())]
            }
            Op::AddScalarAt(a, s, idx) => {
                let mut gs = vec![0.0f32; self.value(*s).len()];
                gs[*idx] = g.iter().map(|&v| v as f64).sum::<f64>() as f32;
                vec![(*a, g.to_vec()), (*s, gs)]
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                vec![
                    (*a, g.iter().zip(&tb.data).map(|(x, y)| x * y).collect()),
                    (*b, g.iter().zip(&ta.data).map(|(x, y)| x * y).collect()),
                ]
            }
            Op::MulConst(a, c) => vec![(*a, g.iter().zip(c.iter()).map(|(x, y)| x * y).collect())],
            Op::Scale(a, c) => vec![(*a, g.iter().map(|x| x * c).collect())],
            Op::Relu(a) => {
                let ta = self.value(*a);
                vec![(*a, g.iter().zip(&ta.data).map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 }).collect())]
            }
            Op::Sigmoid(a) => vec![(*a, g.iter().zip(&out.data).map(|(&gv, &y)| gv * y * (1.0 - y)).collect())],
            Op::Softmax(a) => {
                let c = out.cols();
                let mut gin = vec![0.0f32; out.len()];
                for r in 0..out.rows() {
                    let y = &out.data[r * c..(r + 1) * c];
                    let gy = &g[r * c..(r + 1) * c];
                    let dotp: f64 = y.iter().zip(gy).map(|(&a, &b)| a as f64 * b as f64).sum();
                    for j in 0..c {
                        gin[r * c + j] = (y[j] as f64 * (gy[j] as f64 - dotp)) as f32;
                    }
                }
                vec![(*a, gin)]
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let c = out.cols();
                let gamma = &self.value(*gain).data;
                let mut gx = vec![0.0f32; out.len()];
                let mut gg = vec![0.0f64; c];
                let mut gb = vec![0.0f64; c];
                for r in 0..out.rows() {
                    let xh = &xhat[r * c..(r + 1) * c];
                    let gy = &g[r * c..(r + 1) * c];
                    let mut s1 = 0.0f64;
                    let mut s2 = 0.0f64;
                    for j in 0..c {
                        gg[j] += gy[j] as f64 * xh[j] as f64;
                        gb[j] += gy[j] as f64;
                        let d = gy[j] as f64 * gamma[j] as f64;
                        s1 += d;
                        s2 += d * xh[j] as f64;
                    }
                    let n = c as f64;
                    for j in 0..c {
                        let d = gy[j] as f64 * gamma[j] as f64;
                        gx[r * c + j] = (rstd[r] * (d - s1 / n - xh[j] as f64 * s2 / n)) as f32;
                    }
                }
                vec![
                    (*x, gx),
                    (*gain, gg.into_iter().map(|v| v as f32).collect()),
                    (*bias, gb.into_iter().map(|v| v as f32).collect()),
                ]
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let rows = out.rows();
                let mut off = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + off..r * total + off + c]);
                        }
                        res.push((p, gp));
                    }
                    off += c;
                }
                res
            }
            Op::SliceCols(a, start) => {
                let ta = self.value(*a);
                let (c, len) = (ta.cols(), out.cols());
                let mut ga = vec![0.0f32; ta.len()];
                for r in 0..ta.rows() {
                    ga[r * c + start..r * c + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                vec![(*a, ga)]
            }
            Op::GatherRows(table, ids) => {
                let tt = self.value(*table);
                let c = tt.cols();
                let mut gt = vec![0.0f32; tt.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        gt[id * c + j] += g[r * c + j];
                    }
                }
                vec![(*table, gt)]
            }
            Op::SmoothedCe { logits, probs, dist } => {
                let v = self.value(*logits).cols();
                let mut gl = vec![0.0f32; probs.len()];
                for (r, q) in dist {
                    for j in 0..v {
                        gl[r * v + j] = g[0] * (probs[r * v + j] - q[j]);
                    }
                }
                vec![(*logits, gl)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; self.value(*a).len()])],
            Op::Custom(inputs, op) => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                op.backward(g, &vals, out)
                    .into_iter()
                    .zip(inputs)
                    .filter_map(|(gi, &v)| gi.map(|gi| (v, gi)))
                    .collect()
            }
        }
    }
}

/// Target distribution for label smoothing over `v` classes.
pub fn smoothed_target(gold: usize, v: usize, eps: f32) -> Vec<f32> {
    let off = if v > 1 { eps / (v - 1) as f32 } else { 0.0 };
    let mut q = vec![off; v];
    q[gold] = 1.0 - eps;
    q
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        [r, c] => Ok((*r, *c)),
        [c] => Ok((1, *c)),
        s => shape_err(op, format!("expected a matrix, got {s:?}")),
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::MatMulBt(..) => "matmul_bt",
        Op::Add(..) => "add",
        Op::AddRow(..) => "add_row",
        Op::AddScalarAt(..) => "add_scalar_at",
        Op::Mul(..) => "mul",
        Op::MulConst(..) => "mul_const",
        Op::Scale(..) => "scale",
        Op::Relu(_) => "relu",
        Op::Sigmoid(_) => "sigmoid",
        Op::Softmax(_) => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::ConcatCols(_) => "concat_cols",
        Op::SliceCols(..) => "slice_cols",
        Op::GatherRows(..) => "gather_rows",
        Op::SmoothedCe { .. } => "smoothed_cross_entropy",
        Op::Sum(_) => "sum",
        Op::Custom(_, op) => op.name(),
    }
}
