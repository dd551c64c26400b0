use std::sync::atomic::{AtomicU64, Ordering};

use super::{matmul_raw, Result, Tensor, TensorError};

/// Largest magnitude fed to `exp`.
const EXP_CLAMP: f64 = 700.0;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Right-hand side of an elementwise operation.
#[derive(Debug, Clone, Copy)]
pub enum Operand {
    Var(Var),
    Scalar(f64),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Transpose(usize),
    SoftmaxRows(usize),
    Exp(usize),
    Ln(usize),
    Gelu(usize),
    Sum(usize),
    Mean(usize),
    /// Row standardization; keeps `1/sqrt(var + eps)` per row.
    LayerNorm(usize, Vec<f64>),
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize),
    ConcatRows(Vec<usize>),
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Dynamic gradient tape.
///
/// Nodes are appended in evaluation order, so parents always precede their
/// children and a single reverse sweep visits every node once.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Records an input. Only leaves created with `requires_grad` receive
    /// gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.nodes[self.idx(v)?].requires_grad)
    }

    /// Accumulated gradient, if backward reached this variable.
    pub fn grad(&self, v: Var) -> Result<Option<Tensor>> {
        let node = &self.nodes[self.idx(v)?];
        Ok(node
            .grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape")))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        let rg = self.rg(ia) || self.rg(ib);
        self.push(out, Op::MatMul(ia, ib), rg, "matmul")
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Operand) -> Result<Var> {
        match b {
            Operand::Var(b) => self.binary(op, a, b),
            Operand::Scalar(s) => match op {
                ElementwiseOp::Add => self.add_scalar(a, s),
                ElementwiseOp::Sub => self.add_scalar(a, -s),
                ElementwiseOp::Mul => self.mul_scalar(a, s),
                ElementwiseOp::Div => {
                    if s == 0.0 {
                        return Err(TensorError::DivisionByZero { op: "div" });
                    }
                    self.mul_scalar(a, 1.0 / s)
                }
            },
        }
    }

    fn binary(&mut self, op: ElementwiseOp, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (x, y) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let name = match op {
            ElementwiseOp::Add => "add",
            ElementwiseOp::Sub => "sub",
            ElementwiseOp::Mul => "mul",
            ElementwiseOp::Div => "div",
        };
        if x.shape() != y.shape() {
            return Err(TensorError::ShapeMismatch {
                op: name,
                left: x.shape().to_vec(),
                right: y.shape().to_vec(),
            });
        }
        if op == ElementwiseOp::Div && y.data().contains(&0.0) {
            return Err(TensorError::DivisionByZero { op: name });
        }
        let f: fn(f64, f64) -> f64 = match op {
            ElementwiseOp::Add => |p, q| p + q,
            ElementwiseOp::Sub => |p, q| p - q,
            ElementwiseOp::Mul => |p, q| p * q,
            ElementwiseOp::Div => |p, q| p / q,
        };
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let node_op = match op {
            ElementwiseOp::Add => Op::Add(ia, ib),
            ElementwiseOp::Sub => Op::Sub(ia, ib),
            ElementwiseOp::Mul => Op::Mul(ia, ib),
            ElementwiseOp::Div => Op::Div(ia, ib),
        };
        let rg = self.rg(ia) || self.rg(ib);
        self.push(out, node_op, rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(|v| v + s);
        let rg = self.rg(ia);
        self.push(out, Op::AddScalar(ia), rg, "add_scalar")
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(|v| v * s);
        let rg = self.rg(ia);
        self.push(out, Op::MulScalar(ia, s), rg, "mul_scalar")
    }

    fn row_broadcast(&mut self, a: Var, row: Var, mul: bool) -> Result<Var> {
        let name = if mul { "mul_row" } else { "add_row" };
        let (ia, ir) = (self.idx(a)?, self.idx(row)?);
        let (m, n) = self.nodes[ia].value.dims2()?;
        let r = &self.nodes[ir].value;
        if r.len() != n || r.shape().len() > 1 && r.shape()[0] != 1 {
            return Err(TensorError::ShapeMismatch {
                op: name,
                left: self.nodes[ia].value.shape().to_vec(),
                right: r.shape().to_vec(),
            });
        }
        let rd = r.data();
        let x = self.nodes[ia].value.data();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                let v = x[i * n + j];
                data.push(if mul { v * rd[j] } else { v + rd[j] });
            }
        }
        let out = Tensor::new(self.nodes[ia].value.shape().to_vec(), data)?;
        let rg = self.rg(ia) || self.rg(ir);
        let op = if mul { Op::MulRow(ia, ir) } else { Op::AddRow(ia, ir) };
        self.push(out, op, rg, name)
    }

    /// Adds a length-`n` vector to every row of an `[m×n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, false)
    }

    /// Scales every row of an `[m×n]` matrix elementwise by a length-`n` vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, true)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.transpose()?;
        let rg = self.rg(ia);
        self.push(out, Op::Transpose(ia), rg, "transpose")
    }

    /// Numerically stable softmax over each row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let (m, n) = self.nodes[ia].value.dims2()?;
        let x = self.nodes[ia].value.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[i * n..(i + 1) * n];
            let mut z = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - max).max(-EXP_CLAMP).exp();
                z += *o;
            }
            for o in out.iter_mut() {
                *o /= z;
            }
        }
        let out = Tensor::new(self.nodes[ia].value.shape().to_vec(), data)?;
        let rg = self.rg(ia);
        self.push(out, Op::SoftmaxRows(ia), rg, "softmax_rows")
    }

    /// `exp` with inputs clamped to `[-700, 700]`.
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(|v| v.clamp(-EXP_CLAMP, EXP_CLAMP).exp());
        let rg = self.rg(ia);
        self.push(out, Op::Exp(ia), rg, "exp")
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        if self.nodes[ia].value.data().iter().any(|&v| v <= 0.0) {
            return Err(TensorError::Domain { op: "ln" });
        }
        let out = self.nodes[ia].value.map(f64::ln);
        let rg = self.rg(ia);
        self.push(out, Op::Ln(ia), rg, "ln")
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(|v| gelu(v).0);
        let rg = self.rg(ia);
        self.push(out, Op::Gelu(ia), rg, "gelu")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s = self.nodes[ia].value.data().iter().sum();
        let rg = self.rg(ia);
        self.push(Tensor::scalar(s), Op::Sum(ia), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        if t.is_empty() {
            return Err(TensorError::Invalid("mean of an empty tensor".into()));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(ia);
        self.push(Tensor::scalar(s), Op::Mean(ia), rg, "mean")
    }

    /// Standardizes each row with its own mean and population variance:
    /// `(h - mean) / sqrt(var + eps)`.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(TensorError::Invalid(format!("layer norm eps must be > 0, got {eps}")));
        }
        let ia = self.idx(a)?;
        let (m, n) = self.nodes[ia].value.dims2()?;
        let x = self.nodes[ia].value.data();
        let mut data = vec![0.0; m * n];
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            for (o, &v) in data[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * r;
            }
            inv_std.push(r);
        }
        let out = Tensor::new(self.nodes[ia].value.shape().to_vec(), data)?;
        let rg = self.rg(ia);
        self.push(out, Op::LayerNorm(ia, inv_std), rg, "layer_norm")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let (m, n) = self.nodes[ia].value.dims2()?;
        if start > end || end > n {
            return Err(TensorError::OutOfRange {
                op: "slice_cols",
                start,
                end,
                extent: n,
            });
        }
        let x = self.nodes[ia].value.data();
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&x[i * n + start..i * n + end]);
        }
        let out = Tensor::new(vec![m, w], data)?;
        let rg = self.rg(ia);
        self.push(out, Op::SliceCols(ia, start), rg, "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let first = *idx
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let (m, _) = self.nodes[first].value.dims2()?;
        let mut widths = Vec::with_capacity(idx.len());
        for &i in &idx {
            let (r, c) = self.nodes[i].value.dims2()?;
            if r != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.nodes[first].value.shape().to_vec(),
                    right: self.nodes[i].value.shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for row in 0..m {
            for (&i, &w) in idx.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[i].value.data()[row * w..(row + 1) * w]);
            }
        }
        let out = Tensor::new(vec![m, total], data)?;
        let rg = idx.iter().any(|&i| self.rg(i));
        self.push(out, Op::ConcatCols(idx), rg, "concat_cols")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.rows(start, end)?;
        let rg = self.rg(ia);
        self.push(out, Op::SliceRows(ia, start), rg, "slice_rows")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let first = *idx
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let (_, n) = self.nodes[first].value.dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &i in &idx {
            let (r, c) = self.nodes[i].value.dims2()?;
            if c != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.nodes[first].value.shape().to_vec(),
                    right: self.nodes[i].value.shape().to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(self.nodes[i].value.data());
        }
        let out = Tensor::new(vec![rows, n], data)?;
        let rg = idx.iter().any(|&i| self.rg(i));
        self.push(out, Op::ConcatRows(idx), rg, "concat_rows")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.reshape(shape)?;
        let rg = self.rg(ia);
        self.push(out, Op::Reshape(ia), rg, "reshape")
    }

    /// Propagates d(loss)/d(node) to every reachable node that requires a
    /// gradient. Gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let il = self.idx(loss)?;
        if self.nodes[il].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[il].value.shape().to_vec()));
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; il + 1];
        pending[il] = Some(vec![1.0]);

        for i in (0..=il).rev() {
            let Some(g) = pending[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut pending);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], pending: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let mut send = |j: usize, contrib: Vec<f64>| {
            if !self.nodes[j].requires_grad {
                return;
            }
            match &mut pending[j] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                slot => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2().expect("rank 2");
                let (_, n) = val(*b).dims2().expect("rank 2");
                if self.nodes[*a].requires_grad {
                    // g [m×n] · bᵀ [n×k]
                    let bt = val(*b).transpose().expect("rank 2");
                    send(*a, matmul_raw(g, bt.data(), m, n, k));
                }
                if self.nodes[*b].requires_grad {
                    // aᵀ [k×m] · g [m×n]
                    let at = val(*a).transpose().expect("rank 2");
                    send(*b, matmul_raw(at.data(), g, k, m, n));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a).data(), val(*b).data());
                send(*a, g.iter().zip(y).map(|(g, y)| g * y).collect());
                send(*b, g.iter().zip(x).map(|(g, x)| g * x).collect());
            }
            Op::Div(a, b) => {
                let (x, y) = (val(*a).data(), val(*b).data());
                send(*a, g.iter().zip(y).map(|(g, y)| g / y).collect());
                send(
                    *b,
                    g.iter()
                        .zip(x.iter().zip(y))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect(),
                );
            }
            Op::AddScalar(a) | Op::Reshape(a) => send(*a, g.to_vec()),
            Op::MulScalar(a, s) => send(*a, g.iter().map(|v| v * s).collect()),
            Op::AddRow(a, r) | Op::MulRow(a, r) => {
                let mul = matches!(node.op, Op::MulRow(..));
                let (m, n) = val(*a).dims2().expect("rank 2");
                let rd = val(*r).data();
                let x = val(*a).data();
                if self.nodes[*a].requires_grad {
                    let ga = if mul {
                        (0..m * n).map(|k| g[k] * rd[k % n]).collect()
                    } else {
                        g.to_vec()
                    };
                    send(*a, ga);
                }
                if self.nodes[*r].requires_grad {
                    let mut gr = vec![0.0; n];
                    for k in 0..m * n {
                        gr[k % n] += if mul { g[k] * x[k] } else { g[k] };
                    }
                    send(*r, gr);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = node.value.dims2().expect("rank 2");
                let gt = Tensor::new(vec![m, n], g.to_vec())
                    .and_then(|t| t.transpose())
                    .expect("rank 2");
                send(*a, gt.into_data());
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = node.value.dims2().expect("rank 2");
                let s = node.value.data();
                let mut ga = vec![0.0; m * n];
                for r in 0..m {
                    let span = r * n..(r + 1) * n;
                    let dot: f64 = g[span.clone()].iter().zip(&s[span.clone()]).map(|(g, s)| g * s).sum();
                    for k in span {
                        ga[k] = s[k] * (g[k] - dot);
                    }
                }
                send(*a, ga);
            }
            Op::Exp(a) => {
                let x = val(*a).data();
                let y = node.value.data();
                send(
                    *a,
                    (0..g.len())
                        .map(|k| if x[k].abs() <= EXP_CLAMP { g[k] * y[k] } else { 0.0 })
                        .collect(),
                );
            }
            Op::Ln(a) => {
                let x = val(*a).data();
                send(*a, g.iter().zip(x).map(|(g, x)| g / x).collect());
            }
            Op::Gelu(a) => {
                let x = val(*a).data();
                send(*a, g.iter().zip(x).map(|(g, &x)| g * gelu(x).1).collect());
            }
            Op::Sum(a) => send(*a, vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                send(*a, vec![g[0] / n as f64; n]);
            }
            Op::LayerNorm(a, inv_std) => {
                let (m, n) = node.value.dims2().expect("rank 2");
                let y = node.value.data();
                let mut ga = vec![0.0; m * n];
                for r in 0..m {
                    let span = r * n..(r + 1) * n;
                    let gm = g[span.clone()].iter().sum::<f64>() / n as f64;
                    let gy = g[span.clone()].iter().zip(&y[span.clone()]).map(|(g, y)| g * y).sum::<f64>() / n as f64;
                    for k in span {
                        ga[k] = inv_std[r] * (g[k] - gm - y[k] * gy);
                    }
                }
                send(*a, ga);
            }
            Op::SliceCols(a, start) => {
                let (m, n) = val(*a).dims2().expect("rank 2");
                let (_, w) = node.value.dims2().expect("rank 2");
                let mut ga = vec![0.0; m * n];
                for r in 0..m {
                    ga[r * n + start..r * n + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                send(*a, ga);
            }
            Op::ConcatCols(parts) => {
                let (m, total) = node.value.dims2().expect("rank 2");
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = val(p).dims2().expect("rank 2");
                    let mut gp = Vec::with_capacity(m * w);
                    for r in 0..m {
                        gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    send(p, gp);
                    offset += w;
                }
            }
            Op::SliceRows(a, start) => {
                let (_, n) = val(*a).dims2().expect("rank 2");
                let mut ga = vec![0.0; val(*a).len()];
                ga[start * n..start * n + g.len()].copy_from_slice(g);
                send(*a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    send(p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
        }
    }
}

/// GELU value and derivative (tanh form).
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let value = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * A * x * x);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (value, deriv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::eye(2)).unwrap();
        let b = t.constant(mat(&[&[3.0, 4.0], &[5.0, 6.0]])).unwrap();
        let p = t.matmul(i, b).unwrap();
        assert_eq!(t.value(p).unwrap().data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = t.constant(mat(&[&[1.0, 2.0]])).unwrap();
        let c = t.constant(mat(&[&[3.0], &[4.0]])).unwrap();
        let d = t.matmul(a, c).unwrap();
        assert_eq!(t.value(d).unwrap().data(), &[11.0]);

        let z = t.constant(Tensor::zeros(&[2, 3])).unwrap();
        let any = t.constant(mat(&[&[1.0, -2.0], &[0.5, 7.0], &[3.0, 3.0]])).unwrap();
        let zz = t.matmul(z, any).unwrap();
        assert_eq!(t.value(zz).unwrap(), &Tensor::zeros(&[2, 2]));

        let bad = t.matmul(a, a).unwrap_err();
        assert!(matches!(bad, TensorError::ShapeMismatch { op: "matmul", .. }));
    }

    #[test]
    fn elementwise_examples() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let b = t.constant(Tensor::vector(vec![3.0, 4.0])).unwrap();
        let s = t.elementwise(ElementwiseOp::Add, a, Operand::Var(b)).unwrap();
        assert_eq!(t.value(s).unwrap().data(), &[4.0, 6.0]);
        let z = t.elementwise(ElementwiseOp::Mul, a, Operand::Scalar(0.0)).unwrap();
        assert_eq!(t.value(z).unwrap().data(), &[0.0, 0.0]);
        let d = t.elementwise(ElementwiseOp::Sub, a, Operand::Var(a)).unwrap();
        assert_eq!(t.value(d).unwrap().data(), &[0.0, 0.0]);

        let zero = t.constant(Tensor::vector(vec![1.0, 0.0])).unwrap();
        assert!(matches!(
            t.elementwise(ElementwiseOp::Div, a, Operand::Var(zero)),
            Err(TensorError::DivisionByZero { .. })
        ));
        assert!(matches!(
            t.elementwise(ElementwiseOp::Div, a, Operand::Scalar(0.0)),
            Err(TensorError::DivisionByZero { .. })
        ));
        let three = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        assert!(matches!(t.add(a, three), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let x = t
            .constant(mat(&[&[0.0, 0.0, 0.0]]))
            .unwrap();
        let s = t.softmax_rows(x).unwrap();
        for &v in t.value(s).unwrap().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = t.constant(mat(&[&[1000.0, 1000.0]])).unwrap();
        let s = t.softmax_rows(x).unwrap();
        assert_eq!(t.value(s).unwrap().data(), &[0.5, 0.5]);
        let x = t.constant(mat(&[&[0.0, 3f64.ln()]])).unwrap();
        let s = t.softmax_rows(x).unwrap();
        let v = t.value(s).unwrap().data();
        assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true).unwrap();
        let l = t.sum(x).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        let sq = t.mul(x, x).unwrap();
        let l = t.sum(sq).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().unwrap().data(), &[2.0, 4.0]);
        // accumulation without reset, then reset
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().unwrap().data(), &[4.0, 8.0]);
        t.zero_grad();
        assert!(t.grad(x).unwrap().is_none());

        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        let y = t.leaf(Tensor::vector(vec![5.0, 1.0]), true).unwrap();
        let l = t.sum(y).unwrap();
        t.backward(l).unwrap();
        assert!(t.grad(x).unwrap().is_none());
    }

    #[test]
    fn backward_errors() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        assert!(matches!(t.backward(x), Err(TensorError::NonScalarLoss(_))));
        let mut other = Tape::new();
        let y = other.leaf(Tensor::scalar(1.0), true).unwrap();
        assert!(matches!(t.backward(y), Err(TensorError::ForeignVar)));
    }

    #[test]
    fn exp_clamps_instead_of_overflowing() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1e6, -1e6]), true).unwrap();
        let e = t.exp(x).unwrap();
        assert!(t.value(e).unwrap().is_finite());
    }

    #[test]
    fn overflowing_matmul_errors() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::full(&[1, 2], 1e300)).unwrap();
        let b = t.constant(Tensor::full(&[2, 1], 1e300)).unwrap();
        assert!(matches!(t.matmul(a, b), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn shared_subexpression_gradients_sum() {
        // l = sum((x + x) * x) = 2 Σ x²  →  dl/dx = 4x
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.5, -2.0]), true).unwrap();
        let d = t.add(x, x).unwrap();
        let p = t.mul(d, x).unwrap();
        let l = t.sum(p).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().unwrap().data(), &[6.0, -8.0]);
    }
}
