//! Define-by-run reverse-mode tape.
//!
//! Every op method evaluates eagerly and appends a record, so the tape is
//! always in topological order. [`Tape::forward_eval`] replays the records
//! with new leaf values, which is what the finite-difference checker uses.

use std::collections::HashMap;
use std::ops::Range;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// sqrt(2 / pi)
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Leaf { name: Option<String>, trainable: bool },
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    MatMul,
    Transpose,
    ConcatRows,
    ConcatCols,
    SliceRows(Range<usize>),
    SliceCols(Range<usize>),
    Reshape(usize, usize),
    Exp,
    Log,
    Sin,
    Sigmoid,
    Tanh,
    Gelu,
    Softmax,
    LayerNorm(f64),
    Mean,
    Std,
    Sum,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf { .. } => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale(_) => "scale",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::ConcatRows => "concat_rows",
            OpKind::ConcatCols => "concat_cols",
            OpKind::SliceRows(_) => "slice_rows",
            OpKind::SliceCols(_) => "slice_cols",
            OpKind::Reshape(..) => "reshape",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sin => "sin",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Gelu => "gelu",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm(_) => "layer_norm",
            OpKind::Mean => "mean",
            OpKind::Std => "std",
            OpKind::Sum => "sum",
        }
    }
}

#[derive(Clone, Debug)]
struct Record {
    op: OpKind,
    inputs: Vec<usize>,
    value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    records: Vec<Record>,
}

/// Gradients of a scalar root with respect to every node on the tape.
#[derive(Debug)]
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    named: Vec<(String, Tensor)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of trainable named leaves, in tape order.
    pub fn named(&self) -> &[(String, Tensor)] {
        &self.named
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.named.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn into_named(self) -> Vec<(String, Tensor)> {
        self.named
    }
}

/// How a right operand is broadcast against the left one.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Broadcast {
    Same,
    Row,
    Col,
    Scalar,
}

fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    match (b.rows(), b.cols()) {
        (r, c) if r == a.rows() && c == a.cols() => Ok(Broadcast::Same),
        (1, 1) => Ok(Broadcast::Scalar),
        (1, c) if c == a.cols() => Ok(Broadcast::Row),
        (r, 1) if r == a.rows() => Ok(Broadcast::Col),
        _ => Err(Error::ShapeMismatch {
            op,
            detail: format!("{:?} against {:?}", a.shape(), b.shape()),
        }),
    }
}

#[inline]
fn bidx(kind: Broadcast, cols: usize, i: usize) -> usize {
    match kind {
        Broadcast::Same => i,
        Broadcast::Row => i % cols,
        Broadcast::Col => i / cols,
        Broadcast::Scalar => 0,
    }
}

fn binary(a: &Tensor, b: &Tensor, kind: Broadcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let cols = a.cols();
    let bd = b.data();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, bd[bidx(kind, cols, i)]))
        .collect();
    Tensor::new(a.rows(), a.cols(), data).expect("shape preserved")
}

/// Sum a full-size gradient back down to the broadcast operand's shape.
fn reduce_to(g: &Tensor, kind: Broadcast, shape: [usize; 2]) -> Tensor {
    if kind == Broadcast::Same {
        return g.clone();
    }
    let mut out = Tensor::zeros(shape[0], shape[1]);
    let cols = g.cols();
    let od = out.data_mut();
    for (i, &v) in g.data().iter().enumerate() {
        od[bidx(kind, cols, i)] += v;
    }
    out
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let cols = x.cols();
    if cols == 0 {
        return out;
    }
    for row in out.data_mut().chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Per-row standardization; returns the normalized values and each row's
/// `1 / sqrt(var + eps)`.
fn layer_norm_rows(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let cols = x.cols();
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for row in out.data_mut().chunks_mut(cols.max(1)) {
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
        inv_std.push(inv);
    }
    (out, inv_std)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sample_std(x: &Tensor) -> f64 {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let ss: f64 = x.data().iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (n - 1.0)).sqrt()
}

fn check_inputs(op: &OpKind, vals: &[&Tensor]) -> Result<()> {
    let mismatch = |detail: String| Error::ShapeMismatch {
        op: op.name(),
        detail,
    };
    match op {
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
            broadcast_kind(op.name(), vals[0], vals[1]).map(|_| ())
        }
        OpKind::MatMul => {
            if vals[0].cols() != vals[1].rows() {
                return Err(mismatch(format!(
                    "{:?} x {:?}",
                    vals[0].shape(),
                    vals[1].shape()
                )));
            }
            Ok(())
        }
        OpKind::ConcatRows => {
            let c = vals[0].cols();
            if vals.iter().any(|v| v.cols() != c) {
                return Err(mismatch("column counts differ".into()));
            }
            Ok(())
        }
        OpKind::ConcatCols => {
            let r = vals[0].rows();
            if vals.iter().any(|v| v.rows() != r) {
                return Err(mismatch("row counts differ".into()));
            }
            Ok(())
        }
        OpKind::SliceRows(range) => {
            if range.start > range.end || range.end > vals[0].rows() {
                return Err(mismatch(format!("{range:?} of {} rows", vals[0].rows())));
            }
            Ok(())
        }
        OpKind::SliceCols(range) => {
            if range.start > range.end || range.end > vals[0].cols() {
                return Err(mismatch(format!("{range:?} of {} cols", vals[0].cols())));
            }
            Ok(())
        }
        OpKind::Reshape(r, c) => {
            if r * c != vals[0].len() {
                return Err(mismatch(format!("{} values into {r}x{c}", vals[0].len())));
            }
            Ok(())
        }
        OpKind::Mean | OpKind::Sum | OpKind::Softmax | OpKind::LayerNorm(_) => {
            if vals[0].is_empty() {
                return Err(mismatch("empty input".into()));
            }
            Ok(())
        }
        OpKind::Std => {
            if vals[0].len() < 2 {
                return Err(mismatch("standard deviation needs two values".into()));
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

fn compute(op: &OpKind, vals: &[&Tensor]) -> Result<Tensor> {
    check_inputs(op, vals)?;
    let out = match op {
        OpKind::Leaf { .. } => unreachable!("leaves are not recomputed"),
        OpKind::Add => {
            let k = broadcast_kind("add", vals[0], vals[1])?;
            binary(vals[0], vals[1], k, |a, b| a + b)
        }
        OpKind::Sub => {
            let k = broadcast_kind("sub", vals[0], vals[1])?;
            binary(vals[0], vals[1], k, |a, b| a - b)
        }
        OpKind::Mul => {
            let k = broadcast_kind("mul", vals[0], vals[1])?;
            binary(vals[0], vals[1], k, |a, b| a * b)
        }
        OpKind::Div => {
            let k = broadcast_kind("div", vals[0], vals[1])?;
            binary(vals[0], vals[1], k, |a, b| a / b)
        }
        OpKind::Scale(c) => vals[0].map(|x| x * c),
        OpKind::MatMul => vals[0].matmul(vals[1])?,
        OpKind::Transpose => vals[0].transpose(),
        OpKind::ConcatRows => {
            let cols = vals[0].cols();
            let rows = vals.iter().map(|v| v.rows()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for v in vals {
                data.extend_from_slice(v.data());
            }
            Tensor::new(rows, cols, data)?
        }
        OpKind::ConcatCols => {
            let rows = vals[0].rows();
            let cols = vals.iter().map(|v| v.cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for v in vals {
                    data.extend_from_slice(v.row_slice(r));
                }
            }
            Tensor::new(rows, cols, data)?
        }
        OpKind::SliceRows(range) => {
            let c = vals[0].cols();
            Tensor::new(
                range.len(),
                c,
                vals[0].data()[range.start * c..range.end * c].to_vec(),
            )?
        }
        OpKind::SliceCols(range) => {
            let x = vals[0];
            let mut data = Vec::with_capacity(x.rows() * range.len());
            for r in 0..x.rows() {
                data.extend_from_slice(&x.row_slice(r)[range.clone()]);
            }
            Tensor::new(x.rows(), range.len(), data)?
        }
        OpKind::Reshape(r, c) => Tensor::new(*r, *c, vals[0].data().to_vec())?,
        OpKind::Exp => vals[0].map(f64::exp),
        OpKind::Log => vals[0].map(f64::ln),
        OpKind::Sin => vals[0].map(f64::sin),
        OpKind::Sigmoid => vals[0].map(sigmoid),
        OpKind::Tanh => vals[0].map(f64::tanh),
        OpKind::Gelu => vals[0].map(gelu),
        OpKind::Softmax => softmax_rows(vals[0]),
        OpKind::LayerNorm(eps) => layer_norm_rows(vals[0], *eps).0,
        OpKind::Mean => Tensor::scalar(vals[0].sum() / vals[0].len() as f64),
        OpKind::Sum => Tensor::scalar(vals[0].sum()),
        OpKind::Std => Tensor::scalar(sample_std(vals[0])),
    };
    Ok(out)
}

/// Vector-Jacobian products for one record.
fn vjp(op: &OpKind, vals: &[&Tensor], out: &Tensor, g: &Tensor) -> Vec<Tensor> {
    match op {
        OpKind::Leaf { .. } => vec![],
        OpKind::Add | OpKind::Sub => {
            let k = broadcast_kind("add", vals[0], vals[1]).expect("checked in forward");
            let gb = reduce_to(g, k, vals[1].shape());
            let gb = if *op == OpKind::Sub { gb.map(|x| -x) } else { gb };
            vec![g.clone(), gb]
        }
        OpKind::Mul => {
            let (a, b) = (vals[0], vals[1]);
            let k = broadcast_kind("mul", a, b).expect("checked in forward");
            let ga = binary(g, b, k, |g, b| g * b);
            let gb = reduce_to(&g.zip_map(a, |g, a| g * a), k, b.shape());
            vec![ga, gb]
        }
        OpKind::Div => {
            let (a, b) = (vals[0], vals[1]);
            let k = broadcast_kind("div", a, b).expect("checked in forward");
            let ga = binary(g, b, k, |g, b| g / b);
            let full = binary(&g.zip_map(a, |g, a| g * a), b, k, |ga, b| -ga / (b * b));
            vec![ga, reduce_to(&full, k, b.shape())]
        }
        OpKind::Scale(c) => vec![g.map(|x| x * c)],
        OpKind::MatMul => {
            let ga = Tensor::gemm(g, false, vals[1], true).expect("checked in forward");
            let gb = Tensor::gemm(vals[0], true, g, false).expect("checked in forward");
            vec![ga, gb]
        }
        OpKind::Transpose => vec![g.transpose()],
        OpKind::ConcatRows => {
            let mut start = 0;
            vals.iter()
                .map(|v| {
                    let n = v.len();
                    let t = Tensor::new(v.rows(), v.cols(), g.data()[start..start + n].to_vec())
                        .expect("slice matches");
                    start += n;
                    t
                })
                .collect()
        }
        OpKind::ConcatCols => {
            let mut offset = 0;
            vals.iter()
                .map(|v| {
                    let mut data = Vec::with_capacity(v.len());
                    for r in 0..g.rows() {
                        data.extend_from_slice(&g.row_slice(r)[offset..offset + v.cols()]);
                    }
                    offset += v.cols();
                    Tensor::new(v.rows(), v.cols(), data).expect("slice matches")
                })
                .collect()
        }
        OpKind::SliceRows(range) => {
            let mut gx = Tensor::zeros(vals[0].rows(), vals[0].cols());
            let c = vals[0].cols();
            gx.data_mut()[range.start * c..range.end * c].copy_from_slice(g.data());
            vec![gx]
        }
        OpKind::SliceCols(range) => {
            let x = vals[0];
            let mut gx = Tensor::zeros(x.rows(), x.cols());
            for r in 0..x.rows() {
                for (j, c) in range.clone().enumerate() {
                    gx.set(r, c, g.get(r, j));
                }
            }
            vec![gx]
        }
        OpKind::Reshape(..) => {
            vec![Tensor::new(vals[0].rows(), vals[0].cols(), g.data().to_vec()).expect("same size")]
        }
        OpKind::Exp => vec![g.zip_map(out, |g, y| g * y)],
        OpKind::Log => vec![g.zip_map(vals[0], |g, x| g / x)],
        OpKind::Sin => vec![g.zip_map(vals[0], |g, x| g * x.cos())],
        OpKind::Sigmoid => vec![g.zip_map(out, |g, y| g * y * (1.0 - y))],
        OpKind::Tanh => vec![g.zip_map(out, |g, y| g * (1.0 - y * y))],
        OpKind::Gelu => vec![g.zip_map(vals[0], |g, x| g * gelu_grad(x))],
        OpKind::Softmax => {
            let cols = out.cols();
            let mut gx = Tensor::zeros(out.rows(), cols);
            for r in 0..out.rows() {
                let y = out.row_slice(r);
                let gr = g.row_slice(r);
                let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for c in 0..cols {
                    gx.set(r, c, y[c] * (gr[c] - dot));
                }
            }
            vec![gx]
        }
        OpKind::LayerNorm(eps) => {
            let (y, inv_std) = layer_norm_rows(vals[0], *eps);
            let cols = y.cols();
            let n = cols as f64;
            let mut gx = Tensor::zeros(y.rows(), cols);
            for r in 0..y.rows() {
                let yr = y.row_slice(r);
                let gr = g.row_slice(r);
                let g_mean = gr.iter().sum::<f64>() / n;
                let gy_mean = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                for c in 0..cols {
                    gx.set(r, c, inv_std[r] * (gr[c] - g_mean - yr[c] * gy_mean));
                }
            }
            vec![gx]
        }
        OpKind::Mean => {
            let x = vals[0];
            vec![Tensor::filled(x.rows(), x.cols(), g.item() / x.len() as f64)]
        }
        OpKind::Sum => {
            let x = vals[0];
            vec![Tensor::filled(x.rows(), x.cols(), g.item())]
        }
        OpKind::Std => {
            let x = vals[0];
            let n = x.len() as f64;
            let mean = x.sum() / n;
            let s = out.item();
            let scale = g.item() / ((n - 1.0) * s);
            vec![x.map(|v| (v - mean) * scale)]
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.records[v.0].value
    }

    pub fn op(&self, v: Var) -> &OpKind {
        &self.records[v.0].op
    }

    fn push_leaf(&mut self, name: Option<String>, trainable: bool, value: Tensor) -> Var {
        self.records.push(Record {
            op: OpKind::Leaf { name, trainable },
            inputs: vec![],
            value,
        });
        Var(self.records.len() - 1)
    }

    /// Named leaf. Trainable leaves receive gradients in [`Gradients::named`].
    pub fn input(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Var {
        self.push_leaf(Some(name.into()), trainable, value)
    }

    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        self.input(name, value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(None, false, value)
    }

    fn push(&mut self, op: OpKind, inputs: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let vals: Vec<&Tensor> = idx.iter().map(|&i| &self.records[i].value).collect();
        let value = compute(&op, &vals)?;
        let node = self.records.len();
        if !value.all_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                node,
            });
        }
        self.records.push(Record {
            op,
            inputs: idx,
            value,
        });
        Ok(Var(node))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(OpKind::Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(OpKind::Div, &[a, b])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(OpKind::Scale(c), &[a])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(OpKind::MatMul, &[a, b])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(OpKind::Transpose, &[a])
    }
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                detail: "no inputs".into(),
            });
        }
        self.push(OpKind::ConcatRows, parts)
    }
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                detail: "no inputs".into(),
            });
        }
        self.push(OpKind::ConcatCols, parts)
    }
    pub fn slice_rows(&mut self, a: Var, range: Range<usize>) -> Result<Var> {
        self.push(OpKind::SliceRows(range), &[a])
    }
    pub fn slice_cols(&mut self, a: Var, range: Range<usize>) -> Result<Var> {
        self.push(OpKind::SliceCols(range), &[a])
    }
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        self.push(OpKind::Reshape(rows, cols), &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(OpKind::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.push(OpKind::Log, &[a])
    }
    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.push(OpKind::Sin, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(OpKind::Sigmoid, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.push(OpKind::Tanh, &[a])
    }
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.push(OpKind::Gelu, &[a])
    }
    /// Softmax along the last axis (each row).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.push(OpKind::Softmax, &[a])
    }
    /// Row-wise standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.push(OpKind::LayerNorm(eps), &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(OpKind::Mean, &[a])
    }
    /// Sample standard deviation (n - 1 denominator) over all elements.
    pub fn std(&mut self, a: Var) -> Result<Var> {
        self.push(OpKind::Std, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(OpKind::Sum, &[a])
    }

    /// `x @ w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    pub fn leaf_names(&self) -> impl Iterator<Item = (Var, &str, bool)> {
        self.records.iter().enumerate().filter_map(|(i, r)| match &r.op {
            OpKind::Leaf {
                name: Some(n),
                trainable,
            } => Some((Var(i), n.as_str(), *trainable)),
            _ => None,
        })
    }

    /// Replace named leaf values and re-evaluate every record.
    ///
    /// Returns the value of `root`. Fails on shape mismatch or when a record
    /// produces a non-finite value.
    pub fn forward_eval(&mut self, root: Var, inputs: &HashMap<String, Tensor>) -> Result<Tensor> {
        for i in 0..self.records.len() {
            let record = &self.records[i];
            if let OpKind::Leaf { name: Some(n), .. } = &record.op {
                if let Some(new) = inputs.get(n) {
                    if new.shape() != record.value.shape() {
                        return Err(Error::ShapeMismatch {
                            op: "leaf",
                            detail: format!(
                                "input {n} has shape {:?}, tape expects {:?}",
                                new.shape(),
                                record.value.shape()
                            ),
                        });
                    }
                    self.records[i].value = new.clone();
                }
                continue;
            }
            if matches!(record.op, OpKind::Leaf { .. }) {
                continue;
            }
            let vals: Vec<&Tensor> = record.inputs.iter().map(|&j| &self.records[j].value).collect();
            let value = compute(&record.op, &vals)?;
            if !value.all_finite() {
                return Err(Error::NonFinite {
                    op: record.op.name(),
                    node: i,
                });
            }
            self.records[i].value = value;
        }
        Ok(self.records[root.0].value.clone())
    }

    /// Reverse sweep from a scalar `root`. Fan-out gradients are summed.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_val = &self.records[root.0].value;
        if root_val.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                detail: format!("root must be scalar, got {:?}", root_val.shape()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.records.len()];
        grads[root.0] = Some(Tensor::filled(root_val.rows(), root_val.cols(), 1.0));
        for i in (0..=root.0).rev() {
            let record = &self.records[i];
            if matches!(record.op, OpKind::Leaf { .. }) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let vals: Vec<&Tensor> = record.inputs.iter().map(|&j| &self.records[j].value).collect();
            let input_grads = vjp(&record.op, &vals, &record.value, &g);
            grads[i] = Some(g);
            for (&j, gi) in record.inputs.iter().zip(input_grads) {
                match &mut grads[j] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        // a parameter placed on the tape more than once gets the summed gradient
        let mut named: Vec<(String, Tensor)> = Vec::new();
        for (i, r) in self.records.iter().enumerate() {
            let OpKind::Leaf {
                name: Some(n),
                trainable: true,
            } = &r.op
            else {
                continue;
            };
            let g = grads[i]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(r.value.rows(), r.value.cols()));
            match named.iter_mut().find(|(m, _)| m == n) {
                Some((_, acc)) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => named.push((n.clone(), g)),
            }
        }
        Ok(Gradients {
            by_node: grads,
            named,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_softmax_forward() {
        let mut tape = Tape::new();
        let x = tape.input("x", Tensor::row(vec![1.0, 2.0]), true);
        assert_eq!(tape.value(x).data(), &[1.0, 2.0]);
        let z = tape.constant(Tensor::row(vec![0.0, 0.0]));
        let s = tape.softmax(z).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_by_hand() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::row(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::column(vec![3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param("x", Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.by_name("x").unwrap().item(), 6.0);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param("x", Tensor::row(vec![0.3, -1.2, 2.0, 0.1]));
        let s = tape.softmax(x).unwrap();
        let total = tape.sum(s).unwrap();
        let g = tape.backward(total).unwrap();
        for v in g.by_name("x").unwrap().data() {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param("x", Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn overflow_names_the_op() {
        let mut tape = Tape::new();
        let x = tape.param("x", Tensor::scalar(1000.0));
        match tape.exp(x) {
            Err(Error::NonFinite { op, node }) => {
                assert_eq!(op, "exp");
                assert_eq!(node, 1);
            }
            other => panic!("expected overflow error, got {other:?}"),
        }
    }

    #[test]
    fn replay_uses_new_inputs() {
        let mut tape = Tape::new();
        let x = tape.param("x", Tensor::scalar(2.0));
        let y = tape.mul(x, x).unwrap();
        let inputs = HashMap::from([("x".to_string(), Tensor::scalar(5.0))]);
        assert_eq!(tape.forward_eval(y, &inputs).unwrap().item(), 25.0);
        let bad = HashMap::from([("x".to_string(), Tensor::zeros(2, 1))]);
        assert!(tape.forward_eval(y, &bad).is_err());
    }

    #[test]
    fn broadcast_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(3, 2));
        let row = tape.constant(Tensor::row(vec![1.0, 2.0]));
        let col = tape.constant(Tensor::column(vec![1.0, 2.0, 3.0]));
        let bad = tape.constant(Tensor::zeros(2, 2));
        assert!(tape.add(a, row).is_ok());
        assert!(tape.mul(a, col).is_ok());
        assert!(tape.add(a, bad).is_err());
    }

    #[test]
    fn layer_norm_zero_row_maps_to_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(2, 4));
        let y = tape.layer_norm(x, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }
}
