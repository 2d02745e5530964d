//! Reverse-mode differentiation over a flat operation record.
//!
//! Every op appends one node whose inputs already exist on the tape, so the
//! node order is a topological order and backward is a single reverse sweep.

use super::tensor::{self, gelu, gelu_grad, log_sigmoid, matmul_into, sigmoid, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Gelu(Var),
    Abs(Var),
    Logit { x: Var, eps: f64 },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    SliceCols { x: Var, start: usize, end: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows { x: Var, rows: Vec<usize> },
    MeanRows(Var),
    MaxRows { x: Var, argmax: Vec<usize> },
    Gather { table: Var, index: Vec<usize>, head: usize },
    Overwrite { x: Var, mask: Vec<Option<f64>> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sigmoid(..) => "sigmoid",
            Op::LogSigmoid(..) => "log_sigmoid",
            Op::Gelu(..) => "gelu",
            Op::Abs(..) => "abs",
            Op::Logit { .. } => "logit",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Transpose(..) => "transpose",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SelectRows { .. } => "select_rows",
            Op::MeanRows(..) => "mean_rows",
            Op::MaxRows { .. } => "max_rows",
            Op::Gather { .. } => "gather",
            Op::Overwrite { .. } => "overwrite",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MulCol(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sigmoid(a)
            | Op::LogSigmoid(a)
            | Op::Gelu(a)
            | Op::Abs(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Transpose(a)
            | Op::MeanRows(a) => vec![*a],
            Op::Logit { x, .. }
            | Op::SliceCols { x, .. }
            | Op::SelectRows { x, .. }
            | Op::MaxRows { x, .. }
            | Op::Overwrite { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
            Op::Gather { table, .. } => vec![*table],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Computation record for one forward pass.
///
/// Leaves created with [`Tape::leaf`] participate in gradients; constants do
/// not. [`Tape::backward`] adds into the stored gradients, so calling it twice
/// without [`Tape::zero_grad`] accumulates.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Input handles of the op that produced `v`.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// First node holding a non-finite value, with the name of its op.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op) -> Var {
        let rg = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.dims(a), self.dims(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(vec![ta.rows(), ta.cols()], data).expect("same numel")
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(vec![t.rows(), t.cols()], t.data().iter().map(|&x| f(x)).collect())
            .expect("same numel");
        self.push_op(out, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push_op(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push_op(out, Op::Add(a, b)))
    }

    /// `a (n×m) + b (1×m)`, broadcasting `b` over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, m) = self.dims(a);
        if self.dims(b) != (1, m) {
            return Err(Error::shape(
                "add_row",
                format!("{n}x{m} + {:?}", self.dims(b)),
            ));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(m.max(1)) {
            for (o, &bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        Ok(self.push_op(Tensor::matrix(n, m, out)?, Op::AddRow(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push_op(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push_op(out, Op::Mul(a, b)))
    }

    /// `a (n×m) ⊙ c (n×1)`: scales row `i` of `a` by `c[i]`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (n, m) = self.dims(a);
        if self.dims(c) != (n, 1) {
            return Err(Error::shape(
                "mul_col",
                format!("{n}x{m} * {:?}", self.dims(c)),
            ));
        }
        let cv = self.value(c).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for (row, &s) in out.chunks_mut(m.max(1)).zip(&cv) {
            for o in row.iter_mut() {
                *o *= s;
            }
        }
        Ok(self.push_op(Tensor::matrix(n, m, out)?, Op::MulCol(a, c)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::LogSigmoid(a), log_sigmoid)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), gelu)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    /// `ln(p / (1 - p))` with `p` clipped to `[eps, 1 - eps]`.
    pub fn logit(&mut self, a: Var, eps: f64) -> Var {
        self.unary(a, Op::Logit { x: a, eps }, move |p| {
            let p = p.clamp(eps, 1.0 - eps);
            (p / (1.0 - p)).ln()
        })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = tensor::softmax_rows(self.value(a))?;
        let out = out.reshape(vec![self.dims(a).0, self.dims(a).1])?;
        Ok(self.push_op(out, Op::SoftmaxRows(a)))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = tensor::log_softmax_rows(self.value(a))?;
        let out = out.reshape(vec![self.dims(a).0, self.dims(a).1])?;
        Ok(self.push_op(out, Op::LogSoftmaxRows(a)))
    }

    /// Per-row layer normalisation with learned `gamma`/`beta` (both `1×m`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, m) = self.dims(x);
        if self.dims(gamma) != (1, m) || self.dims(beta) != (1, m) {
            return Err(Error::shape(
                "layer_norm",
                format!("width {m}, gamma {:?}, beta {:?}", self.dims(gamma), self.dims(beta)),
            ));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; n * m];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &xv[i * m..(i + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..m {
                let h = (row[j] - mean) * is;
                xhat[i * m + j] = h;
                out[i * m + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::matrix(n, m, out)?;
        Ok(self.push_op(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push_op(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push_op(Tensor::scalar(s), Op::Mean(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (n, m) = self.dims(a);
        let t = Tensor::matrix(n, m, self.value(a).data().to_vec())
            .expect("same numel")
            .transpose();
        self.push_op(t, Op::Transpose(a))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, m) = self.dims(x);
        if start > end || end > m {
            return Err(Error::shape(
                "slice_cols",
                format!("[{start}, {end}) of {m} columns"),
            ));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * w);
        for i in 0..n {
            out.extend_from_slice(&src[i * m + start..i * m + end]);
        }
        Ok(self.push_op(Tensor::matrix(n, w, out)?, Op::SliceCols { x, start, end }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::shape("concat_cols", "no inputs"));
        };
        let n = self.dims(*first).0;
        if let Some(bad) = parts.iter().find(|p| self.dims(**p).0 != n) {
            return Err(Error::shape(
                "concat_cols",
                format!("row counts {n} vs {}", self.dims(*bad).0),
            ));
        }
        let total: usize = parts.iter().map(|p| self.dims(*p).1).sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for p in parts {
                out.extend_from_slice(self.value(*p).row_slice(i));
            }
        }
        Ok(self.push_op(Tensor::matrix(n, total, out)?, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::shape("concat_rows", "no inputs"));
        };
        let m = self.dims(*first).1;
        if let Some(bad) = parts.iter().find(|p| self.dims(**p).1 != m) {
            return Err(Error::shape(
                "concat_rows",
                format!("column counts {m} vs {}", self.dims(*bad).1),
            ));
        }
        let n: usize = parts.iter().map(|p| self.dims(*p).0).sum();
        let mut out = Vec::with_capacity(n * m);
        for p in parts {
            out.extend_from_slice(self.value(*p).data());
        }
        Ok(self.push_op(Tensor::matrix(n, m, out)?, Op::ConcatRows(parts.to_vec())))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, m) = self.dims(x);
        if let Some(r) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::shape("select_rows", format!("row {r} of {n}")));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            out.extend_from_slice(src.row_slice(r));
        }
        Ok(self.push_op(
            Tensor::matrix(rows.len(), m, out)?,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Column-wise mean over rows: `n×m → 1×m`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (n, m) = self.dims(x);
        let src = self.value(x).data();
        let mut out = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                out[j] += src[i * m + j];
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        self.push_op(Tensor::row(&out), Op::MeanRows(x))
    }

    /// Column-wise maximum over rows: `n×m → 1×m`. The gradient goes to the
    /// first row attaining the maximum.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.dims(x);
        if n == 0 {
            return Err(Error::shape("max_rows", "zero rows"));
        }
        let src = self.value(x).data();
        let mut out = src[..m].to_vec();
        let mut argmax = vec![0; m];
        for i in 1..n {
            for j in 0..m {
                if src[i * m + j] > out[j] {
                    out[j] = src[i * m + j];
                    argmax[j] = i;
                }
            }
        }
        Ok(self.push_op(Tensor::row(&out), Op::MaxRows { x, argmax }))
    }

    /// Looks up `table[index[k], head]` for every entry of a `rows × cols`
    /// index grid.
    pub fn gather(
        &mut self,
        table: Var,
        index: &[usize],
        head: usize,
        rows: usize,
        cols: usize,
    ) -> Result<Var> {
        let (b, h) = self.dims(table);
        if head >= h || index.len() != rows * cols {
            return Err(Error::shape(
                "gather",
                format!("head {head} of {h}, {} indices for {rows}x{cols}", index.len()),
            ));
        }
        if let Some(i) = index.iter().find(|&&i| i >= b) {
            return Err(Error::shape("gather", format!("bucket {i} of {b}")));
        }
        let t = self.value(table);
        let out: Vec<f64> = index.iter().map(|&i| t.get(i, head)).collect();
        Ok(self.push_op(
            Tensor::matrix(rows, cols, out)?,
            Op::Gather {
                table,
                index: index.to_vec(),
                head,
            },
        ))
    }

    /// Replaces masked coordinates with constants. Overwritten coordinates are
    /// cut off from the gradient.
    pub fn overwrite(&mut self, x: Var, mask: &[Option<f64>]) -> Result<Var> {
        let t = self.value(x);
        if mask.len() != t.numel() {
            return Err(Error::shape(
                "overwrite",
                format!("mask of {} for {} values", mask.len(), t.numel()),
            ));
        }
        let data = t
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, m)| m.unwrap_or(v))
            .collect();
        let out = Tensor::matrix(t.rows(), t.cols(), data)?;
        Ok(self.push_op(
            out,
            Op::Overwrite {
                x,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Back-propagates from a scalar `loss`, adding into stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => {
                    for (a, v) in acc.data_mut().iter_mut().zip(&g) {
                        *a += v;
                    }
                }
                None => {
                    let shape = node.value.shape().to_vec();
                    node.grad = Some(Tensor::new(shape, g).expect("grad matches value"));
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let (n, m) = (out.rows(), out.cols());
        let mut send = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.numel();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let k = av.cols();
                // dA = G · Bᵀ, dB = Aᵀ · G
                send(*a, &mut |buf| {
                    let bt = bv.transpose();
                    matmul_into(g, bt.data(), buf, n, m, k);
                });
                send(*b, &mut |buf| {
                    let at = av.transpose();
                    matmul_into(at.data(), g, buf, k, n, m);
                });
            }
            Op::Add(a, b) => {
                send(*a, &mut |buf| add_into(buf, g));
                send(*b, &mut |buf| add_into(buf, g));
            }
            Op::AddRow(a, b) => {
                send(*a, &mut |buf| add_into(buf, g));
                send(*b, &mut |buf| {
                    for row in g.chunks(m.max(1)) {
                        add_into(buf, row);
                    }
                });
            }
            Op::Sub(a, b) => {
                send(*a, &mut |buf| add_into(buf, g));
                send(*b, &mut |buf| {
                    for (o, v) in buf.iter_mut().zip(g) {
                        *o -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                send(*a, &mut |buf| {
                    for ((o, gv), y) in buf.iter_mut().zip(g).zip(bv) {
                        *o += gv * y;
                    }
                });
                send(*b, &mut |buf| {
                    for ((o, gv), x) in buf.iter_mut().zip(g).zip(av) {
                        *o += gv * x;
                    }
                });
            }
            Op::MulCol(a, c) => {
                let (av, cv) = (self.value(*a).data(), self.value(*c).data());
                send(*a, &mut |buf| {
                    for i in 0..n {
                        for j in 0..m {
                            buf[i * m + j] += g[i * m + j] * cv[i];
                        }
                    }
                });
                send(*c, &mut |buf| {
                    for i in 0..n {
                        let mut s = 0.0;
                        for j in 0..m {
                            s += g[i * m + j] * av[i * m + j];
                        }
                        buf[i] += s;
                    }
                });
            }
            Op::Scale(a, s) => send(*a, &mut |buf| {
                for (o, v) in buf.iter_mut().zip(g) {
                    *o += v * s;
                }
            }),
            Op::AddScalar(a) => send(*a, &mut |buf| add_into(buf, g)),
            Op::Sigmoid(a) => send(*a, &mut |buf| {
                for ((o, gv), y) in buf.iter_mut().zip(g).zip(out.data()) {
                    *o += gv * y * (1.0 - y);
                }
            }),
            Op::LogSigmoid(a) => {
                let xv = self.value(*a).data();
                send(*a, &mut |buf| {
                    for ((o, gv), &x) in buf.iter_mut().zip(g).zip(xv) {
                        *o += gv * sigmoid(-x);
                    }
                });
            }
            Op::Gelu(a) => {
                let xv = self.value(*a).data();
                send(*a, &mut |buf| {
                    for ((o, gv), &x) in buf.iter_mut().zip(g).zip(xv) {
                        *o += gv * gelu_grad(x);
                    }
                });
            }
            Op::Abs(a) => {
                let xv = self.value(*a).data();
                send(*a, &mut |buf| {
                    for ((o, gv), &x) in buf.iter_mut().zip(g).zip(xv) {
                        *o += gv * x.signum() * f64::from(x != 0.0);
                    }
                });
            }
            Op::Logit { x, eps } => {
                let xv = self.value(*x).data();
                send(*x, &mut |buf| {
                    for ((o, gv), &p) in buf.iter_mut().zip(g).zip(xv) {
                        if p > *eps && p < 1.0 - eps {
                            *o += gv / (p * (1.0 - p));
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => send(*a, &mut |buf| {
                let y = out.data();
                for i in 0..n {
                    let r = i * m..(i + 1) * m;
                    let dot: f64 = g[r.clone()].iter().zip(&y[r.clone()]).map(|(a, b)| a * b).sum();
                    for j in r {
                        buf[j] += y[j] * (g[j] - dot);
                    }
                }
            }),
            Op::LogSoftmaxRows(a) => send(*a, &mut |buf| {
                let y = out.data();
                for i in 0..n {
                    let r = i * m..(i + 1) * m;
                    let gs: f64 = g[r.clone()].iter().sum();
                    for j in r {
                        buf[j] += g[j] - y[j].exp() * gs;
                    }
                }
            }),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma).data();
                send(*gamma, &mut |buf| {
                    for i in 0..n {
                        for j in 0..m {
                            buf[j] += g[i * m + j] * xhat[i * m + j];
                        }
                    }
                });
                send(*beta, &mut |buf| {
                    for row in g.chunks(m.max(1)) {
                        add_into(buf, row);
                    }
                });
                send(*x, &mut |buf| {
                    let mf = m as f64;
                    for i in 0..n {
                        let r = i * m..(i + 1) * m;
                        let dxhat: Vec<f64> = r.clone().map(|k| g[k] * gv[k - i * m]).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(&xhat[r.clone()]).map(|(a, b)| a * b).sum();
                        for (jj, k) in r.enumerate() {
                            buf[k] += inv_std[i] / mf * (mf * dxhat[jj] - sum_d - xhat[k] * sum_dx);
                        }
                    }
                });
            }
            Op::Sum(a) => send(*a, &mut |buf| {
                for o in buf.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::Mean(a) => send(*a, &mut |buf| {
                let s = g[0] / buf.len() as f64;
                for o in buf.iter_mut() {
                    *o += s;
                }
            }),
            Op::Transpose(a) => send(*a, &mut |buf| {
                // out is n×m, input is m×n
                for i in 0..n {
                    for j in 0..m {
                        buf[j * n + i] += g[i * m + j];
                    }
                }
            }),
            Op::SliceCols { x, start, end } => {
                let src_m = self.value(*x).cols();
                send(*x, &mut |buf| {
                    for i in 0..n {
                        for (jj, j) in (*start..*end).enumerate() {
                            buf[i * src_m + j] += g[i * m + jj];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    send(*p, &mut |buf| {
                        for i in 0..n {
                            for j in 0..w {
                                buf[i * w + j] += g[i * m + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    send(*p, &mut |buf| add_into(buf, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SelectRows { x, rows } => send(*x, &mut |buf| {
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..m {
                        buf[r * m + j] += g[i * m + j];
                    }
                }
            }),
            Op::MeanRows(x) => {
                let src_n = self.value(*x).rows();
                send(*x, &mut |buf| {
                    for i in 0..src_n {
                        for j in 0..m {
                            buf[i * m + j] += g[j] / src_n as f64;
                        }
                    }
                });
            }
            Op::MaxRows { x, argmax } => send(*x, &mut |buf| {
                for (j, &i) in argmax.iter().enumerate() {
                    buf[i * m + j] += g[j];
                }
            }),
            Op::Gather { table, index, head } => {
                let h = self.value(*table).cols();
                send(*table, &mut |buf| {
                    for (k, &b) in index.iter().enumerate() {
                        buf[b * h + head] += g[k];
                    }
                });
            }
            Op::Overwrite { x, mask } => send(*x, &mut |buf| {
                for ((o, gv), mk) in buf.iter_mut().zip(g).zip(mask) {
                    if mk.is_none() {
                        *o += gv;
                    }
                }
            }),
        }
    }
}

fn add_into(buf: &mut [f64], g: &[f64]) {
    for (o, v) in buf.iter_mut().zip(g) {
        *o += v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(&[1.0, 2.0]));
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn grad_of_half_frobenius_at_identity() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::identity(2));
        let sq = t.mul(w, w).unwrap();
        let s = t.sum(sq);
        let half = t.scale(s, 0.5);
        t.backward(half).unwrap();
        assert_eq!(t.grad(w).unwrap(), &Tensor::identity(2));
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(&[1.0, 2.0]));
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[4.0, 8.0]);
        t.zero_grad();
        assert!(t.grad(x).is_none());
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(&[1.0, 2.0]));
        let y = t.scale(x, 2.0);
        assert!(matches!(t.backward(y), Err(Error::Shape { .. })));
    }

    #[test]
    fn constants_get_no_grad() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(&[1.0, 2.0]));
        let c = t.constant(Tensor::row(&[3.0, 4.0]));
        let p = t.mul(x, c).unwrap();
        let s = t.sum(p);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[3.0, 4.0]);
        assert!(t.grad(c).is_none());
    }

    #[test]
    fn topological_order_holds() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::row(&[1.0, 2.0]));
        let b = t.sigmoid(a);
        let c = t.concat_cols(&[a, b]).unwrap();
        let d = t.sum(c);
        for v in [a, b, c, d] {
            assert!(t.inputs(v).iter().all(|i| i.index() < v.index()));
        }
    }

    #[test]
    fn overwrite_blocks_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(&[0.3, 0.4, 0.5]));
        let z = t.overwrite(x, &[Some(1.0), None, Some(0.0)]).unwrap();
        assert_eq!(t.value(z).data(), &[1.0, 0.4, 0.0]);
        let s = t.sum(z);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn first_non_finite_names_the_op() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(&[0.0]));
        let l = t.logit(x, 0.0);
        assert_eq!(t.first_non_finite(), Some((l.index(), "logit")));
    }
}
