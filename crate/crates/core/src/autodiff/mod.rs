//! Tape-based reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Lifecycle: build a [`Tape`], register parameters with [`Tape::leaf`] and
//! data with [`Tape::constant`], compose ops (each returns a [`Var`] handle),
//! then call [`Tape::backward`] on a scalar. `backward` consumes the tape, so a
//! recorded graph can be differentiated exactly once.
//!
//! Every op treats its operands as matrices whose column count is the last
//! axis; only `matmul` and `transpose` insist on rank 2.

mod gradcheck;

pub use gradcheck::{check_gradients, finite_diff_grad, relative_error, GradCheckOutcome};

use std::rc::Rc;

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse row-mixing operator: output row `o` is `sum_k w_ok * input_row(k)`.
///
/// Bilinear resizing, crop extraction and RoI pooling are all instances of
/// this map, which keeps them linear and differentiable with one backward rule.
#[derive(Clone, Debug, PartialEq)]
pub struct RowMix {
    pub in_rows: usize,
    pub taps: Vec<Vec<(usize, f64)>>,
}

impl RowMix {
    pub fn out_rows(&self) -> usize {
        self.taps.len()
    }

    /// `self` followed by `next` as a single map.
    pub fn then(&self, next: &RowMix) -> Result<RowMix> {
        if next.in_rows != self.out_rows() {
            return dim_err(format!(
                "cannot chain row maps: {} outputs into {} inputs",
                self.out_rows(),
                next.in_rows
            ));
        }
        let mut taps = Vec::with_capacity(next.taps.len());
        let mut acc = vec![0.0; self.in_rows];
        for out in &next.taps {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for &(mid, w) in out {
                for &(src, v) in &self.taps[mid] {
                    acc[src] += w * v;
                }
            }
            taps.push(
                acc.iter()
                    .enumerate()
                    .filter(|(_, &w)| w != 0.0)
                    .map(|(k, &w)| (k, w))
                    .collect(),
            );
        }
        Ok(RowMix { in_rows: self.in_rows, taps })
    }

    /// Apply to a plain row-major buffer with `cols` columns.
    pub fn apply(&self, data: &[f64], cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.out_rows() * cols];
        for (o, taps) in self.taps.iter().enumerate() {
            let dst = &mut out[o * cols..(o + 1) * cols];
            for &(k, w) in taps {
                for (d, s) in dst.iter_mut().zip(&data[k * cols..(k + 1) * cols]) {
                    *d += w * s;
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    DivCol(Var, Var),
    Scale(Var, f64),
    DivScalar(Var, Var),
    Exp(Var),
    Sigmoid(Var),
    Softplus(Var),
    Powf(Var, f64),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    RowNorms(Var, f64),
    LayerNormRows(Var, f64),
    Sum(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    GatherRows(Var, Rc<[usize]>),
    RowMix(Var, Rc<RowMix>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward computation. Single-threaded by construction (`Rc` inside).
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of every `requires_grad` leaf, produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

fn require_rank2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return dim_err(format!("{what} expects a matrix, got shape {:?}", t.shape()));
    }
    Ok((t.shape()[0], t.shape()[1]))
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

    /// Trainable input: gradients are reported for it after `backward`.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Const, false)
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x).map(f);
        self.push(v, op, &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = require_rank2(self.value(a), "matmul lhs")?;
        let (k2, n) = require_rank2(self.value(b), "matmul rhs")?;
        if k != k2 {
            return dim_err(format!("matmul inner dims differ: {m}x{k} by {k2}x{n}"));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for (o, &bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += aip * bv;
                }
            }
        }
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = require_rank2(self.value(x), "transpose")?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xd[i * n + j];
            }
        }
        let t = Tensor::matrix(n, m, out)?;
        Ok(self.push(t, Op::Transpose(x), &[x]))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        same_shape(self.value(a), self.value(b), what)?;
        let av = self.value(a);
        let data = av.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, x: Var, r: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let xv = self.value(x);
        let rv = self.value(r);
        let c = xv.cols();
        if rv.numel() != c {
            return dim_err(format!("{what}: row of {} values against {c} columns", rv.numel()));
        }
        let data = xv
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(rv.data()).map(|(&a, &b)| f(a, b)))
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(t, op, &[x, r]))
    }

    /// `x + b` with `b` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        self.row_broadcast(x, b, "add_row", |a, b| a + b, Op::AddRow(x, b))
    }

    /// `x * g` with `g` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        self.row_broadcast(x, g, "mul_row", |a, b| a * b, Op::MulRow(x, g))
    }

    /// Divide row `i` of `x` by `c[i]`.
    pub fn div_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let xv = self.value(x);
        let cv = self.value(c);
        let rows = xv.rows();
        if cv.numel() != rows {
            return dim_err(format!("div_col: {} divisors for {rows} rows", cv.numel()));
        }
        let cols = xv.cols();
        let data = xv
            .data()
            .chunks(cols)
            .zip(cv.data())
            .flat_map(|(row, &d)| row.iter().map(move |&a| a / d))
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(t, Op::DivCol(x, c), &[x, c]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    /// `x / s` for a one-element tensor `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if !sv.is_scalar() {
            return dim_err(format!("div_scalar divisor has shape {:?}", sv.shape()));
        }
        let d = sv.item();
        Ok(self.unary(x, |v| v / d, Op::DivScalar(x, s)))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    /// Elementwise `x^p` on non-negative inputs. At `x == 0` the derivative is
    /// taken as 0 for `p != 1`.
    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, |v| v.powf(p), Op::Powf(x, p))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::SoftmaxRows(x), &[x])
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::LogSoftmaxRows(x), &[x])
    }

    /// Per-row Euclidean norms, floored at `eps`; shape `rows x 1`.
    pub fn row_norms(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let data: Vec<f64> = xv
            .data()
            .chunks(c)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps))
            .collect();
        let n = data.len();
        let t = Tensor::matrix(n, 1, data).expect("row count");
        self.push(t, Op::RowNorms(x, eps), &[x])
    }

    /// Rows scaled to unit length: `x / max(|x|, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let n = self.row_norms(x, eps);
        self.div_col(x, n)
    }

    /// Per-row standardization (no affine part): `(x - mean) / sqrt(var + eps)`.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * r);
        }
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::LayerNormRows(x, eps), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if len == 0 || start + len > c {
            return dim_err(format!("slice_cols {start}..{} of {c} columns", start + len));
        }
        let data: Vec<f64> = xv.data().chunks(c).flat_map(|r| r[start..start + len].iter().copied()).collect();
        let t = Tensor::matrix(xv.rows(), len, data)?;
        Ok(self.push(t, Op::SliceCols(x, start), &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat_cols of nothing");
        };
        let rows = self.value(first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return dim_err("concat_cols row counts differ");
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::matrix(rows, total, data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat_rows of nothing");
        };
        let cols = self.value(first).cols();
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return dim_err("concat_rows column counts differ");
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols;
        let t = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Rows of `table` picked by `ids` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, cols) = (tv.rows(), tv.cols());
        if ids.is_empty() {
            return dim_err("gather_rows with no ids");
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Input(format!("row id {bad} out of range for {rows} rows")));
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        let t = Tensor::matrix(ids.len(), cols, data)?;
        Ok(self.push(t, Op::GatherRows(table, ids.into()), &[table]))
    }

    /// Apply a sparse row-mixing operator; the result is `out_rows x cols`.
    pub fn row_mix(&mut self, x: Var, map: Rc<RowMix>) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != map.in_rows {
            return dim_err(format!("row map expects {} rows, got {}", map.in_rows, xv.rows()));
        }
        let cols = xv.cols();
        let data = map.apply(xv.data(), cols);
        let t = Tensor::matrix(map.out_rows(), cols, data)?;
        Ok(self.push(t, Op::RowMix(x, map), &[x]))
    }

    /// Reverse sweep from a one-element `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes;
        if loss.0 >= nodes.len() {
            return Err(Error::Contract("loss var does not belong to this tape".into()));
        }
        if !nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf | Op::Const) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
        }

        let grads = nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match node.op {
                Op::Leaf => Some(match g {
                    Some(d) => Tensor::new(node.value.shape().to_vec(), d).expect("grad shape"),
                    None => Tensor::zeros(node.value.shape()),
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Run `f` on the gradient buffer of `v`, allocating zeros on first touch.
/// Inputs that do not require gradients are skipped.
fn accum(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
    f(buf);
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    let y = node.value.data();
    match &node.op {
        Op::Leaf | Op::Const => {}
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[1];
            let ad = val(*a).data();
            let bd = val(*b).data();
            accum(nodes, grads, *a, |da| {
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[i * n + j] * bd[p * n + j];
                        }
                        da[i * k + p] += s;
                    }
                }
            });
            accum(nodes, grads, *b, |db| {
                for i in 0..m {
                    for p in 0..k {
                        let aip = ad[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += aip * g[i * n + j];
                        }
                    }
                }
            });
        }
        Op::Transpose(x) => {
            let (m, n) = (val(*x).shape()[0], val(*x).shape()[1]);
            accum(nodes, grads, *x, |dx| {
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] += g[j * m + i];
                    }
                }
            });
        }
        Op::Add(a, b) => {
            accum(nodes, grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            accum(nodes, grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
        }
        Op::Sub(a, b) => {
            accum(nodes, grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            accum(nodes, grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (val(*a).data(), val(*b).data());
            accum(nodes, grads, *a, |d| {
                for ((d, g), b) in d.iter_mut().zip(g).zip(bd) {
                    *d += g * b;
                }
            });
            accum(nodes, grads, *b, |d| {
                for ((d, g), a) in d.iter_mut().zip(g).zip(ad) {
                    *d += g * a;
                }
            });
        }
        Op::AddRow(x, b) => {
            let c = val(*b).numel();
            accum(nodes, grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            accum(nodes, grads, *b, |d| {
                for row in g.chunks(c) {
                    d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
            });
        }
        Op::MulRow(x, r) => {
            let rd = val(*r).data();
            let xd = val(*x).data();
            let c = rd.len();
            accum(nodes, grads, *x, |d| {
                for (drow, grow) in d.chunks_mut(c).zip(g.chunks(c)) {
                    for ((d, g), r) in drow.iter_mut().zip(grow).zip(rd) {
                        *d += g * r;
                    }
                }
            });
            accum(nodes, grads, *r, |d| {
                for (grow, xrow) in g.chunks(c).zip(xd.chunks(c)) {
                    for ((d, g), x) in d.iter_mut().zip(grow).zip(xrow) {
                        *d += g * x;
                    }
                }
            });
        }
        Op::DivCol(x, c) => {
            let cd = val(*c).data();
            let xd = val(*x).data();
            let cols = val(*x).cols();
            accum(nodes, grads, *x, |d| {
                for ((drow, grow), &s) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(cd) {
                    drow.iter_mut().zip(grow).for_each(|(d, g)| *d += g / s);
                }
            });
            accum(nodes, grads, *c, |d| {
                for (i, (grow, xrow)) in g.chunks(cols).zip(xd.chunks(cols)).enumerate() {
                    let dot: f64 = grow.iter().zip(xrow).map(|(g, x)| g * x).sum();
                    d[i] -= dot / (cd[i] * cd[i]);
                }
            });
        }
        Op::Scale(x, s) => {
            accum(nodes, grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * s));
        }
        Op::DivScalar(x, s) => {
            let sv = val(*s).item();
            let xd = val(*x).data();
            accum(nodes, grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g / sv));
            accum(nodes, grads, *s, |d| {
                let dot: f64 = g.iter().zip(xd).map(|(g, x)| g * x).sum();
                d[0] -= dot / (sv * sv);
            });
        }
        Op::Exp(x) => {
            accum(nodes, grads, *x, |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                    *d += g * y;
                }
            });
        }
        Op::Sigmoid(x) => {
            accum(nodes, grads, *x, |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                    *d += g * y * (1.0 - y);
                }
            });
        }
        Op::Softplus(x) => {
            let xd = val(*x).data();
            accum(nodes, grads, *x, |d| {
                for ((d, g), &x) in d.iter_mut().zip(g).zip(xd) {
                    *d += g * sigmoid(x);
                }
            });
        }
        Op::Powf(x, p) => {
            let xd = val(*x).data();
            let p = *p;
            accum(nodes, grads, *x, |d| {
                for ((d, g), &x) in d.iter_mut().zip(g).zip(xd) {
                    let dydx = if x == 0.0 {
                        if p == 1.0 { 1.0 } else { 0.0 }
                    } else {
                        p * x.powf(p - 1.0)
                    };
                    *d += g * dydx;
                }
            });
        }
        Op::Gelu(x) => {
            let xd = val(*x).data();
            accum(nodes, grads, *x, |d| {
                for ((d, g), &x) in d.iter_mut().zip(g).zip(xd) {
                    *d += g * gelu_grad(x);
                }
            });
        }
        Op::SoftmaxRows(x) => {
            let c = node.value.cols();
            accum(nodes, grads, *x, |d| {
                for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += y * (g - dot);
                    }
                }
            });
        }
        Op::LogSoftmaxRows(x) => {
            let c = node.value.cols();
            accum(nodes, grads, *x, |d| {
                for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                    let gsum: f64 = grow.iter().sum();
                    for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += g - y.exp() * gsum;
                    }
                }
            });
        }
        Op::RowNorms(x, eps) => {
            let xv = val(*x);
            let c = xv.cols();
            accum(nodes, grads, *x, |d| {
                for (i, (drow, xrow)) in d.chunks_mut(c).zip(xv.data().chunks(c)).enumerate() {
                    let n = y[i];
                    let raw = xrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if raw > *eps {
                        drow.iter_mut().zip(xrow).for_each(|(d, x)| *d += g[i] * x / n);
                    }
                }
            });
        }
        Op::LayerNormRows(x, eps) => {
            let xv = val(*x);
            let c = xv.cols();
            let cf = c as f64;
            accum(nodes, grads, *x, |d| {
                for (((drow, grow), yrow), xrow) in
                    d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)).zip(xv.data().chunks(c))
                {
                    let mean = xrow.iter().sum::<f64>() / cf;
                    let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cf;
                    let r = 1.0 / (var + eps).sqrt();
                    let gmean = grow.iter().sum::<f64>() / cf;
                    let gy = grow.iter().zip(yrow).map(|(g, y)| g * y).sum::<f64>() / cf;
                    for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += r * (g - gmean - y * gy);
                    }
                }
            });
        }
        Op::Sum(x) => {
            accum(nodes, grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0]));
        }
        Op::SliceCols(x, start) => {
            let c = val(*x).cols();
            let len = node.value.cols();
            accum(nodes, grads, *x, |d| {
                for (drow, grow) in d.chunks_mut(c).zip(g.chunks(len)) {
                    drow[*start..start + len].iter_mut().zip(grow).for_each(|(d, g)| *d += g);
                }
            });
        }
        Op::ConcatCols(parts) => {
            let total = node.value.cols();
            let mut offset = 0;
            for &p in parts {
                let c = val(p).cols();
                accum(nodes, grads, p, |d| {
                    for (drow, grow) in d.chunks_mut(c).zip(g.chunks(total)) {
                        drow.iter_mut().zip(&grow[offset..offset + c]).for_each(|(d, g)| *d += g);
                    }
                });
                offset += c;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = val(p).numel();
                accum(nodes, grads, p, |d| {
                    d.iter_mut().zip(&g[offset..offset + n]).for_each(|(d, g)| *d += g);
                });
                offset += n;
            }
        }
        Op::Reshape(x) => {
            accum(nodes, grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
        }
        Op::GatherRows(table, ids) => {
            let c = node.value.cols();
            accum(nodes, grads, *table, |d| {
                for (r, &id) in ids.iter().enumerate() {
                    d[id * c..(id + 1) * c]
                        .iter_mut()
                        .zip(&g[r * c..(r + 1) * c])
                        .for_each(|(d, g)| *d += g);
                }
            });
        }
        Op::RowMix(x, map) => {
            let c = node.value.cols();
            accum(nodes, grads, *x, |d| {
                for (o, taps) in map.taps.iter().enumerate() {
                    let grow = &g[o * c..(o + 1) * c];
                    for &(k, w) in taps {
                        d[k * c..(k + 1) * c].iter_mut().zip(grow).for_each(|(d, g)| *d += w * g);
                    }
                }
            });
        }
    }
}
