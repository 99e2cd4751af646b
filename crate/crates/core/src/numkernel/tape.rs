//! Append-only gradient tape.
//!
//! Every operation pushes one node holding its output value and the inputs it
//! read. Nodes are stored in creation order, which is already a topological
//! order, so the backward pass is a single reverse sweep that visits each node
//! once. Values are checked for finiteness as they are produced; the first
//! offending node is reported by index and operation name.

use std::sync::Arc;

use super::kernels::{self, View, ViewMut};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sentinel gather index producing an exact zero.
pub const GATHER_ZERO: usize = usize::MAX;

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, row: Var },
    MulRow { x: Var, row: Var },
    Scale { x: Var, s: f64 },
    Sigmoid(Var),
    Gelu(Var),
    Silu(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, mask: Mask, probs: Vec<f64> },
    Gather { x: Var, index: Arc<[usize]> },
    Concat { parts: Vec<Var> },
    SliceRows { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    MaxRows { x: Var, argmax: Vec<usize> },
    NormalizeRows { x: Var, norms: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64> },
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow { .. } => "add_row",
            Op::MulRow { .. } => "mul_row",
            Op::Scale { .. } => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Gelu(_) => "gelu",
            Op::Silu(_) => "silu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "attention",
            Op::Gather { .. } => "gather",
            Op::Concat { .. } => "concat",
            Op::SliceRows { .. } => "slice_rows",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MeanRows(_) => "mean_rows",
            Op::MaxRows { .. } => "max_rows",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Reshape(_) => "reshape",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Causal masking for [`Tape::attention`]: query row `i` may attend to key
/// rows `0..=offset + i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mask {
    None,
    Causal { offset: usize },
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the leaves that required them.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn dim_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{op}: incompatible shapes {a:?} and {b:?}"))
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

    /// Drops every node created after `len`. Vars issued past that point
    /// become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                node: id,
                op: op.name(),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(id))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Attention probabilities `[heads x queries x keys]` saved by an
    /// [`Tape::attention`] node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    fn mat_dims(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Dimension(format!("{op}: expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// `op(a) x op(b)` where `op` optionally transposes a stored matrix.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.mat_dims(a, "matmul")?;
        let (br, bc) = self.mat_dims(b, "matmul")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        {
            let av = View::dense(self.value(a).data(), ar, ac);
            let bv = View::dense(self.value(b).data(), br, bc);
            let av = if ta { av.t() } else { av };
            let bv = if tb { bv.t() } else { bv };
            kernels::gemm(1.0, av, bv, 0.0, ViewMut::dense(&mut out, m, n));
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, ta, tb }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(shape, data), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        self.zip_map(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn row_broadcast(&mut self, x: Var, row: Var, mul: bool) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(row).numel() != cols {
            return Err(dim_err(
                if mul { "mul_row" } else { "add_row" },
                self.shape(x),
                self.shape(row),
            ));
        }
        let shape = self.shape(x).to_vec();
        let r = self.value(row).data();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if mul { v * r[i % cols] } else { v + r[i % cols] })
            .collect();
        let rg = self.rg(x) || self.rg(row);
        let op = if mul {
            Op::MulRow { x, row }
        } else {
            Op::AddRow { x, row }
        };
        self.push(Tensor::from_parts(shape, data), op, rg)
    }

    /// Adds `row` (numel == last dim of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, false)
    }

    /// Multiplies every row of `x` elementwise by `row`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, true)
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape, data), op, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.map(x, Op::Scale { x, s }, |v| v * s)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Sigmoid(x), kernels::sigmoid)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Gelu(x), kernels::gelu)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Silu(x), |v| v * kernels::sigmoid(v))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Range(format!(
                "softmax axis {axis} invalid for shape {shape:?}"
            )));
        }
        let data = kernels::softmax_axis(self.value(x).data(), &shape, axis);
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape, data), Op::Softmax { x, axis }, rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(gain).numel() != cols || self.value(bias).numel() != cols {
            return Err(Error::Dimension(format!(
                "layer_norm: last dimension {cols} vs gain {:?} / bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let out = kernels::layer_norm(
            self.value(x).data(),
            cols,
            self.value(gain).data(),
            self.value(bias).data(),
            eps,
        );
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            Tensor::from_parts(shape, out.y),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat: out.xhat,
                rstd: out.rstd,
            },
            rg,
        )
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[n x d]`, `k` and `v` are `[m x d]`; the `d` columns are split
    /// into `heads` contiguous blocks. Returns `[n x d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Mask) -> Result<Var> {
        let (n, d) = self.mat_dims(q, "attention")?;
        let (m, dk) = self.mat_dims(k, "attention")?;
        if dk != d || self.shape(v) != self.shape(k) {
            return Err(Error::Dimension(format!(
                "attention: q {:?}, k {:?}, v {:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Dimension(format!("attention: {d} columns not divisible into {heads} heads")));
        }
        if let Mask::Causal { offset } = mask {
            if offset + n > m {
                return Err(Error::Dimension(format!(
                    "attention: causal offset {offset} + {n} queries exceeds {m} keys"
                )));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * n * m];
        let mut out = vec![0.0; n * d];
        {
            let qd = self.value(q).data();
            let kd = self.value(k).data();
            let vd = self.value(v).data();
            for h in 0..heads {
                let p = &mut probs[h * n * m..(h + 1) * n * m];
                kernels::gemm(
                    scale,
                    View::block(qd, n, d, h * dh, dh),
                    View::block(kd, m, d, h * dh, dh).t(),
                    0.0,
                    ViewMut::dense(p, n, m),
                );
                for i in 0..n {
                    let row = &mut p[i * m..(i + 1) * m];
                    let visible = match mask {
                        Mask::None => m,
                        Mask::Causal { offset } => offset + i + 1,
                    };
                    kernels::softmax_rows(&mut row[..visible], visible);
                    row[visible..].iter_mut().for_each(|x| *x = 0.0);
                }
                kernels::gemm(
                    1.0,
                    View::dense(p, n, m),
                    View::block(vd, m, d, h * dh, dh),
                    0.0,
                    ViewMut::block(&mut out, n, d, h * dh, dh),
                );
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            Tensor::from_parts(vec![n, d], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            },
            rg,
        )
    }

    /// `out[i] = x[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != index.len() || shape.is_empty() {
            return Err(Error::Dimension(format!(
                "gather: {} indices for output shape {shape:?}",
                index.len()
            )));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n);
        for &i in index.iter() {
            if i == GATHER_ZERO {
                out.push(0.0);
            } else if i < src.len() {
                out.push(src[i]);
            } else {
                return Err(Error::Range(format!("gather index {i} >= {}", src.len())));
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape, out), Op::Gather { x, index }, rg)
    }

    /// Picks rows of a `[n x d]` matrix (embedding lookup, row selection).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.mat_dims(x, "select_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Range(format!("row {bad} out of range for {n} rows")));
        }
        if rows.is_empty() {
            return Err(Error::Argument("select_rows: no rows requested".into()));
        }
        let index: Vec<usize> = rows
            .iter()
            .flat_map(|&r| (0..d).map(move |c| r * d + c))
            .collect();
        self.gather(x, index.into(), vec![rows.len(), d])
    }

    /// Stacks matrices with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Argument("concat_rows: nothing to concatenate".into()))?;
        let cols = self.value(first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(dim_err("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::from_parts(vec![rows, cols], data),
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if len == 0 || start + len > rows {
            return Err(Error::Range(format!(
                "slice_rows {start}..{} of {rows} rows",
                start + len
            )));
        }
        let data = t.data()[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(x);
        self.push(Tensor::from_parts(vec![len, cols], data), Op::SliceRows { x, start }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = Tensor::new(shape, self.value(x).data().to_vec())?;
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Column means of a `[n x d]` matrix, returned as `[1 x d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, d) = (t.rows(), t.cols());
        let mut out = vec![0.0; d];
        for r in 0..n {
            for (o, v) in out.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let rg = self.rg(x);
        self.push(Tensor::from_parts(vec![1, d], out), Op::MeanRows(x), rg)
    }

    /// Column maxima of a `[n x d]` matrix as `[1 x d]`; first row wins ties.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, d) = (t.rows(), t.cols());
        let mut out = t.row(0).to_vec();
        let mut argmax = vec![0; d];
        for r in 1..n {
            for (c, &v) in t.row(r).iter().enumerate() {
                if v > out[c] {
                    out[c] = v;
                    argmax[c] = r;
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_parts(vec![1, d], out), Op::MaxRows { x, argmax }, rg)
    }

    /// Scales each row to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        let shape = t.shape().to_vec();
        let mut data = t.data().to_vec();
        let mut norms = Vec::with_capacity(t.rows());
        for row in data.chunks_mut(cols) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape, data), Op::NormalizeRows { x, norms }, rg)
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` `[n x V]`. Rows whose target is `None` are skipped.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let t = self.value(logits);
        let (n, vocab) = (t.rows(), t.cols());
        if targets.len() != n {
            return Err(Error::Dimension(format!(
                "cross_entropy: {n} logit rows vs {} targets",
                targets.len()
            )));
        }
        let mut probs = t.data().to_vec();
        kernels::softmax_rows(&mut probs, vocab);
        let mut loss = 0.0;
        for (r, tgt) in targets.iter().enumerate() {
            if let Some(c) = *tgt {
                if c >= vocab {
                    return Err(Error::Range(format!("target id {c} >= vocabulary {vocab}")));
                }
                let row = t.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                loss += lse - row[c];
            }
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    node: id,
                    op: node.op.name(),
                });
            }
            self.backward_node(node, &g, &mut grads);
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.value(v).numel()]);
        }
        f(slot.as_mut().expect("just initialised"));
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let at = self.value(a);
                let bt = self.value(b);
                let (ar, ac) = (at.shape()[0], at.shape()[1]);
                let (br, bc) = (bt.shape()[0], bt.shape()[1]);
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let gv = View::dense(g, m, n);
                let bview = {
                    let v = View::dense(bt.data(), br, bc);
                    if tb {
                        v.t()
                    } else {
                        v
                    }
                };
                let aview = {
                    let v = View::dense(at.data(), ar, ac);
                    if ta {
                        v.t()
                    } else {
                        v
                    }
                };
                // d op(a) = g op(b)^T ; d op(b) = op(a)^T g
                self.acc(grads, a, |ga| {
                    let dst = ViewMut::dense(ga, ar, ac);
                    let dst = if ta { dst.t() } else { dst };
                    kernels::gemm(1.0, gv, bview.t(), 1.0, dst);
                });
                self.acc(grads, b, |gb| {
                    let dst = ViewMut::dense(gb, br, bc);
                    let dst = if tb { dst.t() } else { dst };
                    kernels::gemm(1.0, aview.t(), gv, 1.0, dst);
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.acc(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.acc(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRow { x, row } => {
                let cols = self.value(*x).cols();
                self.acc(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
                self.acc(grads, *row, |gr| {
                    for (i, v) in g.iter().enumerate() {
                        gr[i % cols] += v;
                    }
                });
            }
            Op::MulRow { x, row } => {
                let cols = self.value(*x).cols();
                let xv = self.value(*x).data();
                let rv = self.value(*row).data();
                self.acc(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * rv[i % cols];
                    }
                });
                self.acc(grads, *row, |gr| {
                    for (i, v) in g.iter().enumerate() {
                        gr[i % cols] += v * xv[i];
                    }
                });
            }
            Op::Scale { x, s } => {
                self.acc(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b * s));
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                self.acc(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * kernels::gelu_grad(xv[i]);
                    }
                });
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        let s = kernels::sigmoid(xv[i]);
                        gx[i] += g[i] * (s + xv[i] * s * (1.0 - s));
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = out.data();
                let (outer, len, inner) = kernels::axis_split(out.shape(), *axis);
                self.acc(grads, *x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: f64 = (0..len)
                                .map(|a| g[base + a * inner] * y[base + a * inner])
                                .sum();
                            for a in 0..len {
                                let j = base + a * inner;
                                gx[j] += y[j] * (g[j] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let cols = out.cols();
                let gn = self.value(*gain).data();
                self.acc(grads, *gain, |gg| {
                    for (i, v) in g.iter().enumerate() {
                        gg[i % cols] += v * xhat[i];
                    }
                });
                self.acc(grads, *bias, |gb| {
                    for (i, v) in g.iter().enumerate() {
                        gb[i % cols] += v;
                    }
                });
                self.acc(grads, *x, |gx| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let base = r * cols;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..cols {
                            let dxh = g[base + c] * gn[c];
                            m1 += dxh;
                            m2 += dxh * xhat[base + c];
                        }
                        m1 /= cols as f64;
                        m2 /= cols as f64;
                        for c in 0..cols {
                            let dxh = g[base + c] * gn[c];
                            gx[base + c] += rs * (dxh - m1 - xhat[base + c] * m2);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            } => {
                self.attention_backward(*q, *k, *v, *heads, probs, *mask, g, grads);
            }
            Op::Gather { x, index } => {
                self.acc(grads, *x, |gx| {
                    for (o, &i) in index.iter().enumerate() {
                        if i != GATHER_ZERO {
                            gx[i] += g[o];
                        }
                    }
                });
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.acc(grads, p, |gp| {
                        gp.iter_mut().zip(&g[off..off + n]).for_each(|(a, b)| *a += b)
                    });
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = out.cols();
                let off = start * cols;
                self.acc(grads, *x, |gx| {
                    gx[off..off + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, b)| *a += b)
                });
            }
            Op::Reshape(x) => {
                self.acc(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
            }
            Op::Sum(x) => {
                self.acc(grads, *x, |gx| gx.iter_mut().for_each(|a| *a += g[0]));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                self.acc(grads, *x, |gx| gx.iter_mut().for_each(|a| *a += g[0] / n));
            }
            Op::MeanRows(x) => {
                let t = self.value(*x);
                let (n, d) = (t.rows(), t.cols());
                self.acc(grads, *x, |gx| {
                    for r in 0..n {
                        for c in 0..d {
                            gx[r * d + c] += g[c] / n as f64;
                        }
                    }
                });
            }
            Op::MaxRows { x, argmax } => {
                let d = out.cols();
                self.acc(grads, *x, |gx| {
                    for (c, &r) in argmax.iter().enumerate() {
                        gx[r * d + c] += g[c];
                    }
                });
            }
            Op::NormalizeRows { x, norms } => {
                let y = out.data();
                let cols = out.cols();
                self.acc(grads, *x, |gx| {
                    for (r, &n) in norms.iter().enumerate() {
                        let base = r * cols;
                        let dot: f64 = (0..cols).map(|c| y[base + c] * g[base + c]).sum();
                        for c in 0..cols {
                            gx[base + c] += (g[base + c] - y[base + c] * dot) / n;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let vocab = self.value(*logits).cols();
                self.acc(grads, *logits, |gl| {
                    for (r, tgt) in targets.iter().enumerate() {
                        if let Some(c) = *tgt {
                            let base = r * vocab;
                            for j in 0..vocab {
                                gl[base + j] += g[0] * probs[base + j];
                            }
                            gl[base + c] -= g[0];
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        mask: Mask,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let qt = self.value(q);
        let (n, d) = (qt.rows(), qt.cols());
        let m = self.value(k).rows();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = qt.data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut dscores_all = vec![0.0; heads * n * m];
        for h in 0..heads {
            let p = &probs[h * n * m..(h + 1) * n * m];
            let ds = &mut dscores_all[h * n * m..(h + 1) * n * m];
            // dP = dOut_h V_h^T
            kernels::gemm(
                1.0,
                View::block(g, n, d, h * dh, dh),
                View::block(vd, m, d, h * dh, dh).t(),
                0.0,
                ViewMut::dense(ds, n, m),
            );
            for i in 0..n {
                let visible = match mask {
                    Mask::None => m,
                    Mask::Causal { offset } => offset + i + 1,
                };
                let prow = &p[i * m..(i + 1) * m];
                let drow = &mut ds[i * m..(i + 1) * m];
                let dot: f64 = (0..visible).map(|j| prow[j] * drow[j]).sum();
                for j in 0..m {
                    drow[j] = if j < visible {
                        prow[j] * (drow[j] - dot) * scale
                    } else {
                        0.0
                    };
                }
            }
        }
        self.acc(grads, v, |gv| {
            for h in 0..heads {
                let p = &probs[h * n * m..(h + 1) * n * m];
                kernels::gemm(
                    1.0,
                    View::dense(p, n, m).t(),
                    View::block(g, n, d, h * dh, dh),
                    1.0,
                    ViewMut::block(gv, m, d, h * dh, dh),
                );
            }
        });
        self.acc(grads, q, |gq| {
            for h in 0..heads {
                let ds = &dscores_all[h * n * m..(h + 1) * n * m];
                kernels::gemm(
                    1.0,
                    View::dense(ds, n, m),
                    View::block(kd, m, d, h * dh, dh),
                    1.0,
                    ViewMut::block(gq, n, d, h * dh, dh),
                );
            }
        });
        self.acc(grads, k, |gk| {
            for h in 0..heads {
                let ds = &dscores_all[h * n * m..(h + 1) * n * m];
                kernels::gemm(
                    1.0,
                    View::dense(ds, n, m).t(),
                    View::block(qd, n, d, h * dh, dh),
                    1.0,
                    ViewMut::block(gk, m, d, h * dh, dh),
                );
            }
        });
    }
}
