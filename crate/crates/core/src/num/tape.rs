//! Reverse-mode autodiff on a linear tape.
//!
//! Every op appends a node holding its forward value; `backward` walks the
//! tape once in reverse and accumulates adjoints. One tape per minibatch:
//! per-example forwards are stitched into batch losses with `concat_rows`,
//! so batch-level objectives (for example losses with in-batch negatives)
//! propagate into every example's weights in a single pass.
//!
//! Ops validate shapes and domains at construction. The tape is append-only;
//! a `Var` is an index and stays valid for the tape's lifetime.

use crate::error::{Error, Result};
use crate::num::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
const NORM_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    Affine(Var, f64),
    Tanh(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    SumRows(Var),
    L2NormRows(Var),
    DivCols(Var, Var),
    LayerNorm(Var, Var, Var),
    Gather(Var, Vec<usize>),
    SelectCols(Var, Vec<usize>),
    ConcatCols(Var, Var),
    SliceCols(Var, usize, usize),
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
    MeanOverRows(Var),
}

struct Node {
    op: Op,
    value: Tensor,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss w.r.t. `v`. Zero tensor if the
    /// loss did not depend on `v`.
    pub fn grad(&self, v: Var) -> Tensor {
        let t = &self.nodes[v.0].value;
        if self.grads.is_empty() || self.grads[v.0].is_empty() {
            return Tensor::zeros(t.rows, t.cols);
        }
        Tensor { rows: t.rows, cols: t.cols, data: self.grads[v.0].clone() }
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(Tensor::from_vec(1, 1, vec![v]).expect("1x1"))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::Matmul(a, b), v))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    fn binary_same_shape(&mut self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if (ar, ac) != (br, bc) {
            return Err(Error::shape(op, format!("{ar}x{ac} vs {br}x{bc}")));
        }
        Ok((ar, ac))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.binary_same_shape("add", a, b)?;
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x + y).collect();
        Ok(self.push(Op::Add(a, b), Tensor { rows: r, cols: c, data }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.binary_same_shape("sub", a, b)?;
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x - y).collect();
        Ok(self.push(Op::Sub(a, b), Tensor { rows: r, cols: c, data }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.binary_same_shape("mul", a, b)?;
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x * y).collect();
        Ok(self.push(Op::Mul(a, b), Tensor { rows: r, cols: c, data }))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.binary_same_shape("div", a, b)?;
        if self.value(b).data.iter().any(|&y| y == 0.0) {
            return Err(Error::domain("div", "zero denominator"));
        }
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x / y).collect();
        Ok(self.push(Op::Div(a, b), Tensor { rows: r, cols: c, data }))
    }

    /// Row-broadcast add: `a` is n x d, `b` is 1 x d.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if br != 1 || bc != ac {
            return Err(Error::shape("add_bias", format!("{ar}x{ac} + {br}x{bc}")));
        }
        let mut v = self.value(a).clone();
        for i in 0..ar {
            for j in 0..ac {
                v.data[i * ac + j] += self.value(b).data[j];
            }
        }
        Ok(self.push(Op::AddBias(a, b), v))
    }

    /// Elementwise `k * x + c`. Only `k` matters to the adjoint.
    pub fn affine(&mut self, a: Var, k: f64, c: f64) -> Var {
        let v = self.value(a).map(|x| k * x + c);
        self.push(Op::Affine(a, k), v)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.affine(a, k, 0.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu_fwd);
        self.push(Op::Gelu(a), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data.iter().any(|&x| x <= 0.0) {
            return Err(Error::domain("log", "input must be strictly positive"));
        }
        let v = self.value(a).map(f64::ln);
        Ok(self.push(Op::Log(a), v))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data.iter().any(|&x| x < 0.0) {
            return Err(Error::domain("sqrt", "input must be non-negative"));
        }
        let v = self.value(a).map(f64::sqrt);
        Ok(self.push(Op::Sqrt(a), v))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(Error::domain("clamp", format!("lo {lo} > hi {hi}")));
        }
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        Ok(self.push(Op::Clamp(a, lo, hi), v))
    }

    /// Row-wise softmax, max-shifted for stability.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = Tensor::zeros(x.rows, x.cols);
        for i in 0..x.rows {
            let row = x.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..x.cols {
                let e = (row[j] - m).exp();
                v.data[i * x.cols + j] = e;
                z += e;
            }
            for j in 0..x.cols {
                v.data[i * x.cols + j] /= z;
            }
        }
        self.push(Op::SoftmaxRows(a), v)
    }

    /// Row-wise log-sum-exp, n x d -> n x 1.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = Tensor::zeros(x.rows, 1);
        for i in 0..x.rows {
            let row = x.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&t| (t - m).exp()).sum();
            v.data[i] = m + z.ln();
        }
        self.push(Op::LogSumExpRows(a), v)
    }

    /// Row sums, n x d -> n x 1.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = Tensor::zeros(x.rows, 1);
        for i in 0..x.rows {
            v.data[i] = x.row(i).iter().sum();
        }
        self.push(Op::SumRows(a), v)
    }

    /// Row-wise Euclidean norms, n x d -> n x 1.
    pub fn l2norm_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = Tensor::zeros(x.rows, 1);
        for i in 0..x.rows {
            v.data[i] = x.row(i).iter().map(|t| t * t).sum::<f64>().sqrt();
        }
        self.push(Op::L2NormRows(a), v)
    }

    /// Divide row i of `a` (n x d) by scalar `c[i]` (n x 1).
    pub fn div_cols(&mut self, a: Var, c: Var) -> Result<Var> {
        let (ar, ac) = self.value(a).shape();
        let (cr, cc) = self.value(c).shape();
        if cr != ar || cc != 1 {
            return Err(Error::shape("div_cols", format!("{ar}x{ac} / {cr}x{cc}")));
        }
        if self.value(c).data.iter().any(|&y| y == 0.0) {
            return Err(Error::domain("div_cols", "zero denominator"));
        }
        let mut v = self.value(a).clone();
        for i in 0..ar {
            let d = self.value(c).data[i];
            for j in 0..ac {
                v.data[i * ac + j] /= d;
            }
        }
        Ok(self.push(Op::DivCols(a, c), v))
    }

    /// Fused row-wise layer norm: `gamma * (x - mean)/sqrt(var + eps) + beta`.
    /// `gamma` and `beta` are 1 x d.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, d) = self.value(x).shape();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let s = self.value(v).shape();
            if s != (1, d) {
                return Err(Error::shape("layernorm", format!("{name} is {}x{}, want 1x{d}", s.0, s.1)));
            }
        }
        let mut out = Tensor::zeros(n, d);
        for i in 0..n {
            let row = self.value(x).row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&t| (t - mean) * (t - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..d {
                let xhat = (row[j] - mean) * inv;
                out.data[i * d + j] = self.value(gamma).data[j] * xhat + self.value(beta).data[j];
            }
        }
        Ok(self.push(Op::LayerNorm(x, gamma, beta), out))
    }

    /// Row lookup: `table` is V x d, output is idx.len() x d. Duplicate
    /// indices accumulate gradient into the same table row.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (v_rows, d) = self.value(table).shape();
        if let Some(&bad) = idx.iter().find(|&&i| i >= v_rows) {
            return Err(Error::domain("gather", format!("index {bad} out of {v_rows} rows")));
        }
        let mut out = Tensor::zeros(idx.len(), d);
        for (r, &i) in idx.iter().enumerate() {
            out.data[r * d..(r + 1) * d].copy_from_slice(self.value(table).row(i));
        }
        Ok(self.push(Op::Gather(table, idx.to_vec()), out))
    }

    /// Pick one element per row: out[i] = a[i, idx[i]], n x d -> n x 1.
    pub fn select_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = self.value(a).shape();
        if idx.len() != n {
            return Err(Error::shape("select_cols", format!("{} indices for {n} rows", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= d) {
            return Err(Error::domain("select_cols", format!("column {bad} out of {d}")));
        }
        let mut out = Tensor::zeros(n, 1);
        for i in 0..n {
            out.data[i] = self.value(a).at(i, idx[i]);
        }
        Ok(self.push(Op::SelectCols(a, idx.to_vec()), out))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ar != br {
            return Err(Error::shape("concat_cols", format!("{ar}x{ac} | {br}x{bc}")));
        }
        let mut out = Tensor::zeros(ar, ac + bc);
        for i in 0..ar {
            out.data[i * (ac + bc)..i * (ac + bc) + ac].copy_from_slice(self.value(a).row(i));
            out.data[i * (ac + bc) + ac..(i + 1) * (ac + bc)].copy_from_slice(self.value(b).row(i));
        }
        Ok(self.push(Op::ConcatCols(a, b), out))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.value(a).shape();
        if start + len > d {
            return Err(Error::shape("slice_cols", format!("[{start}..{}) of {d} cols", start + len)));
        }
        let mut out = Tensor::zeros(n, len);
        for i in 0..n {
            out.data[i * len..(i + 1) * len]
                .copy_from_slice(&self.value(a).row(i)[start..start + len]);
        }
        Ok(self.push(Op::SliceCols(a, start, len), out))
    }

    /// Vertical concatenation; all parts must share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_rows", "no parts"));
        };
        let d = self.value(first).cols;
        let mut rows = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.1 != d {
                return Err(Error::shape("concat_rows", format!("cols {} vs {d}", s.1)));
            }
            rows += s.0;
        }
        let mut out = Tensor::zeros(rows, d);
        let mut at = 0;
        for &p in parts {
            let t = self.value(p);
            out.data[at..at + t.len()].copy_from_slice(&t.data);
            at += t.len();
        }
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data.iter().sum();
        self.push(Op::Sum(a), Tensor { rows: 1, cols: 1, data: vec![s] })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: f64 = t.data.iter().sum::<f64>() / t.len() as f64;
        self.push(Op::Mean(a), Tensor { rows: 1, cols: 1, data: vec![s] })
    }

    /// Column means over rows, n x d -> 1 x d.
    pub fn mean_over_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = Tensor::zeros(1, x.cols);
        for i in 0..x.rows {
            for j in 0..x.cols {
                v.data[j] += x.at(i, j);
            }
        }
        for j in 0..x.cols {
            v.data[j] /= x.rows as f64;
        }
        self.push(Op::MeanOverRows(a), v)
    }

    /// Reverse pass from a scalar loss. Re-runs clear previous gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.len()));
        }
        self.grads = vec![Vec::new(); self.nodes.len()];
        self.grads[loss.0] = vec![1.0];

        for i in (0..=loss.0).rev() {
            if self.grads[i].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut self.grads[i]);
            let op = self.nodes[i].op.clone();
            self.accumulate(i, &op, &g);
            self.grads[i] = g;
        }
        Ok(())
    }

    fn ensure(&mut self, v: Var) -> &mut Vec<f64> {
        if self.grads[v.0].is_empty() {
            let n = self.nodes[v.0].value.len();
            self.grads[v.0] = vec![0.0; n];
        }
        &mut self.grads[v.0]
    }

    fn accumulate(&mut self, node: usize, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let gt = Tensor {
                    rows: self.nodes[node].value.rows,
                    cols: self.nodes[node].value.cols,
                    data: g.to_vec(),
                };
                let da = gt.matmul(&self.value(*b).transpose()).expect("shape checked");
                let db = self.value(*a).transpose().matmul(&gt).expect("shape checked");
                add_into(self.ensure(*a), &da.data);
                add_into(self.ensure(*b), &db.data);
            }
            Op::Transpose(a) => {
                let (r, c) = self.nodes[node].value.shape();
                let gt = Tensor { rows: r, cols: c, data: g.to_vec() }.transpose();
                add_into(self.ensure(*a), &gt.data);
            }
            Op::Add(a, b) => {
                add_into(self.ensure(*a), g);
                add_into(self.ensure(*b), g);
            }
            Op::Sub(a, b) => {
                add_into(self.ensure(*a), g);
                sub_into(self.ensure(*b), g);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g.iter().zip(&self.value(*b).data).map(|(gi, y)| gi * y).collect();
                let db: Vec<f64> = g.iter().zip(&self.value(*a).data).map(|(gi, x)| gi * x).collect();
                add_into(self.ensure(*a), &da);
                add_into(self.ensure(*b), &db);
            }
            Op::Div(a, b) => {
                let y = &self.nodes[node].value.data;
                let bv = &self.value(*b).data;
                let da: Vec<f64> = g.iter().zip(bv).map(|(gi, d)| gi / d).collect();
                let db: Vec<f64> =
                    g.iter().zip(y.iter().zip(bv)).map(|(gi, (yi, d))| -gi * yi / d).collect();
                add_into(self.ensure(*a), &da);
                add_into(self.ensure(*b), &db);
            }
            Op::AddBias(a, b) => {
                add_into(self.ensure(*a), g);
                let d = self.value(*b).cols;
                let rows = g.len() / d;
                let gb = self.ensure(*b);
                for i in 0..rows {
                    for j in 0..d {
                        gb[j] += g[i * d + j];
                    }
                }
            }
            Op::Affine(a, k) => {
                let da: Vec<f64> = g.iter().map(|gi| gi * k).collect();
                add_into(self.ensure(*a), &da);
            }
            Op::Tanh(a) => {
                let y = self.nodes[node].value.data.clone();
                let da: Vec<f64> = g.iter().zip(&y).map(|(gi, t)| gi * (1.0 - t * t)).collect();
                add_into(self.ensure(*a), &da);
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data.clone();
                let da: Vec<f64> = g.iter().zip(&x).map(|(gi, &t)| gi * gelu_grad(t)).collect();
                add_into(self.ensure(*a), &da);
            }
            Op::Exp(a) => {
                let y = self.nodes[node].value.data.clone();
                let da: Vec<f64> = g.iter().zip(&y).map(|(gi, e)| gi * e).collect();
                add_into(self.ensure(*a), &da);
            }
            Op::Log(a) => {
                let x = self.value(*a).data.clone();
                let da: Vec<f64> = g.iter().zip(&x).map(|(gi, t)| gi / t).collect();
                add_into(self.ensure(*a), &da);
            }
            Op::Sqrt(a) => {
                let y = self.nodes[node].value.data.clone();
                let da: Vec<f64> =
                    g.iter().zip(&y).map(|(gi, s)| gi / (2.0 * s.max(NORM_GUARD))).collect();
                add_into(self.ensure(*a), &da);
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data.clone();
                let da: Vec<f64> = g
                    .iter()
                    .zip(&x)
                    .map(|(gi, &t)| if t >= *lo && t <= *hi { *gi } else { 0.0 })
                    .collect();
                add_into(self.ensure(*a), &da);
            }
            Op::SoftmaxRows(a) => {
                let y = self.nodes[node].value.clone();
                let mut da = vec![0.0; y.len()];
                for i in 0..y.rows {
                    let row = y.row(i);
                    let gr = &g[i * y.cols..(i + 1) * y.cols];
                    let dot: f64 = row.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                    for j in 0..y.cols {
                        da[i * y.cols + j] = row[j] * (gr[j] - dot);
                    }
                }
                add_into(self.ensure(*a), &da);
            }
            Op::LogSumExpRows(a) => {
                let x = self.value(*a).clone();
                let lse = self.nodes[node].value.clone();
                let mut da = vec![0.0; x.len()];
                for i in 0..x.rows {
                    for j in 0..x.cols {
                        da[i * x.cols + j] = g[i] * (x.at(i, j) - lse.data[i]).exp();
                    }
                }
                add_into(self.ensure(*a), &da);
            }
            Op::SumRows(a) => {
                let (n, d) = self.value(*a).shape();
                let mut da = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..d {
                        da[i * d + j] = g[i];
                    }
                }
                add_into(self.ensure(*a), &da);
            }
            Op::L2NormRows(a) => {
                let x = self.value(*a).clone();
                let norms = self.nodes[node].value.clone();
                let mut da = vec![0.0; x.len()];
                for i in 0..x.rows {
                    let n = norms.data[i].max(NORM_GUARD);
                    for j in 0..x.cols {
                        da[i * x.cols + j] = g[i] * x.at(i, j) / n;
                    }
                }
                add_into(self.ensure(*a), &da);
            }
            Op::DivCols(a, c) => {
                let y = self.nodes[node].value.clone();
                let cv = self.value(*c).data.clone();
                let (n, d) = y.shape();
                let mut da = vec![0.0; n * d];
                let mut dc = vec![0.0; n];
                for i in 0..n {
                    for j in 0..d {
                        da[i * d + j] = g[i * d + j] / cv[i];
                        dc[i] -= g[i * d + j] * y.at(i, j) / cv[i];
                    }
                }
                add_into(self.ensure(*a), &da);
                add_into(self.ensure(*c), &dc);
            }
            Op::LayerNorm(x, gamma, beta) => {
                let xv = self.value(*x).clone();
                let gv = self.value(*gamma).data.clone();
                let (n, d) = xv.shape();
                let mut dx = vec![0.0; n * d];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for i in 0..n {
                    let row = xv.row(i);
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|&t| (t - mean) * (t - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let gr = &g[i * d..(i + 1) * d];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    let xhat: Vec<f64> = row.iter().map(|&t| (t - mean) * inv).collect();
                    for j in 0..d {
                        let dxh = gr[j] * gv[j];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xhat[j];
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                    }
                    for j in 0..d {
                        let dxh = gr[j] * gv[j];
                        dx[i * d + j] = inv
                            * (dxh - sum_dxhat / d as f64 - xhat[j] * sum_dxhat_xhat / d as f64);
                    }
                }
                add_into(self.ensure(*x), &dx);
                add_into(self.ensure(*gamma), &dgamma);
                add_into(self.ensure(*beta), &dbeta);
            }
            Op::Gather(table, idx) => {
                let d = self.value(*table).cols;
                let gt = self.ensure(*table);
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] += g[r * d + j];
                    }
                }
            }
            Op::SelectCols(a, idx) => {
                let d = self.value(*a).cols;
                let ga = self.ensure(*a);
                for (i, &j) in idx.iter().enumerate() {
                    ga[i * d + j] += g[i];
                }
            }
            Op::ConcatCols(a, b) => {
                let (n, ac) = self.value(*a).shape();
                let bc = self.value(*b).cols;
                let w = ac + bc;
                {
                    let ga = self.ensure(*a);
                    for i in 0..n {
                        for j in 0..ac {
                            ga[i * ac + j] += g[i * w + j];
                        }
                    }
                }
                let gb = self.ensure(*b);
                for i in 0..n {
                    for j in 0..bc {
                        gb[i * bc + j] += g[i * w + ac + j];
                    }
                }
            }
            Op::SliceCols(a, start, len) => {
                let (n, d) = self.value(*a).shape();
                let ga = self.ensure(*a);
                for i in 0..n {
                    for j in 0..*len {
                        ga[i * d + start + j] += g[i * len + j];
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let gp = self.ensure(p);
                    add_into(gp, &g[at..at + n]);
                    at += n;
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                let da = vec![g[0]; n];
                add_into(self.ensure(*a), &da);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let da = vec![g[0] / n as f64; n];
                add_into(self.ensure(*a), &da);
            }
            Op::MeanOverRows(a) => {
                let (n, d) = self.value(*a).shape();
                let mut da = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..d {
                        da[i * d + j] = g[j] / n as f64;
                    }
                }
                add_into(self.ensure(*a), &da);
            }
        }
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    debug_assert_eq!(acc.len(), g.len());
    for (a, &b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn sub_into(acc: &mut [f64], g: &[f64]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a -= b;
    }
}

fn gelu_fwd(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        assert!(matches!(tape.backward(a), Err(Error::NonScalarLoss(4))));
    }

    #[test]
    fn matmul_grads_match_hand_computation() {
        // loss = sum(A @ B) => dA = 1 B^T rows, dB = A^T 1.
        let mut tape = Tape::new();
        let a = tape.leaf(t(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t(2, 2, vec![5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum(c);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).data, vec![11.0, 15.0, 11.0, 15.0]);
        assert_eq!(tape.grad(b).data, vec![4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn gradient_accumulates_across_shared_use() {
        // loss = sum(x + x) => dx = 2.
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 3, vec![1.0, 2.0, 3.0]));
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).data, vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grad_is_orthogonal_to_constants() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]));
        let y = tape.softmax_rows(x);
        for i in 0..2 {
            let s: f64 = tape.value(y).row(i).iter().sum();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
        }
        // Constant upstream gradient means zero input gradient: softmax is
        // invariant to per-row shifts.
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        for v in &tape.grad(x).data {
            assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn logsumexp_is_stable_for_large_inputs() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 2, vec![1000.0, 1000.0]));
        let y = tape.logsumexp_rows(x);
        assert_abs_diff_eq!(tape.value(y).data[0], 1000.0 + 2.0f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn l2norm_zero_row_has_guarded_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 3, vec![0.0, 0.0, 0.0]));
        let n = tape.l2norm_rows(x);
        let loss = tape.sum(n);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gather_accumulates_duplicate_indices() {
        let mut tape = Tape::new();
        let table = tape.leaf(t(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let rows = tape.gather(table, &[1, 1, 0]).unwrap();
        let loss = tape.sum(rows);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(table).data, vec![1.0, 1.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_rows_splits_gradient_back() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(1, 2, vec![1.0, 2.0]));
        let b = tape.leaf(t(2, 2, vec![3.0, 4.0, 5.0, 6.0]));
        let c = tape.concat_rows(&[a, b]).unwrap();
        assert_eq!(tape.value(c).shape(), (3, 2));
        let w = tape.leaf(t(3, 2, vec![1.0, 10.0, 100.0, 1000.0, 10000.0, 100000.0]));
        let p = tape.mul(c, w).unwrap();
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).data, vec![1.0, 10.0]);
        assert_eq!(tape.grad(b).data, vec![100.0, 1000.0, 10000.0, 100000.0]);
    }

    #[test]
    fn layernorm_output_is_normalized() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 4, vec![1.0, 2.0, 3.0, 4.0]));
        let gamma = tape.leaf(t(1, 4, vec![1.0; 4]));
        let beta = tape.leaf(t(1, 4, vec![0.0; 4]));
        let y = tape.layernorm(x, gamma, beta).unwrap();
        let row = tape.value(y).row(0);
        let mean: f64 = row.iter().sum::<f64>() / 4.0;
        let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(var, 1.0, epsilon = 1e-3);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 2, vec![1.0, 0.0]));
        assert!(tape.log(x).is_err());
    }

    #[test]
    fn div_rejects_zero_denominator() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(1, 2, vec![1.0, 2.0]));
        let b = tape.leaf(t(1, 2, vec![1.0, 0.0]));
        assert!(tape.div(a, b).is_err());
    }

    #[test]
    fn slice_then_concat_restores_gradient_layout() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(2, 4, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let left = tape.slice_cols(x, 0, 2).unwrap();
        let right = tape.slice_cols(x, 2, 2).unwrap();
        let back = tape.concat_cols(left, right).unwrap();
        let loss = tape.mean(back);
        tape.backward(loss).unwrap();
        for v in &tape.grad(x).data {
            assert_abs_diff_eq!(*v, 1.0 / 8.0, epsilon = 1e-12);
        }
    }
}
