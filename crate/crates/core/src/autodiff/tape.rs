//! Reverse-mode tape over a fixed primitive set.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward pass. [`Tape::backward`] walks the nodes in reverse
//! and accumulates gradients for every node that depends on a
//! gradient-requiring leaf.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvPadding {
    /// Wraps around within consecutive blocks of `segment` rows.
    Circular { segment: usize },
    /// Output row `t` sees rows `t-k+1..=t`; earlier rows are zero.
    Causal,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, row: Var },
    Scale { x: Var, c: f64 },
    MulScalar { x: Var, s: Var },
    AddScalar { x: Var, s: Var },
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    Gelu(Var),
    Conv1d { x: Var, w: Var, b: Var, cols: Vec<f64>, src: Vec<Option<usize>>, k: usize },
    Embedding { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
    Abs(Var),
    Huber { x: Var, delta: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    grad_enabled: bool,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            grad_enabled: true,
            ..Default::default()
        }
    }

    /// A tape that records values only; nothing on it requires gradients.
    pub fn no_grad() -> Self {
        Tape::default()
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf for a stored parameter, created once per tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.trainable);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(self.data(a), self.data(b), &mut out, m, k, n, false, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, trans_b: false }, rg))
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (n, k2)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(shape_err("matmul_t", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(self.data(a), self.data(b), &mut out, m, k, n, false, true);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, trans_b: true }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let d = self.data(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n, m], out).unwrap(), Op::Transpose(x), rg)
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        Ok(self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "sub", |x, y| x - y)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), rg))
    }

    /// Adds a length-`n` row to every row of an `m x n` tensor.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.nodes[row.0].value.len() != n {
            return Err(shape_err("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.data(row).to_vec();
        let mut out = self.data(x).to_vec();
        for i in 0..m {
            for (o, rv) in out[i * n..(i + 1) * n].iter_mut().zip(&r) {
                *o += rv;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRow { x, row }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.data(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out).unwrap(), Op::Scale { x, c }, rg)
    }

    /// `s * x` for a one-element `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.nodes[s.0].value.len() != 1 {
            return Err(shape_err("mul_scalar", self.shape(x), self.shape(s)));
        }
        let sv = self.data(s)[0];
        let out = self.data(x).iter().map(|v| v * sv).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(Tensor::new(shape, out)?, Op::MulScalar { x, s }, rg))
    }

    /// `x + s` for a one-element `s`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.nodes[s.0].value.len() != 1 {
            return Err(shape_err("add_scalar", self.shape(x), self.shape(s)));
        }
        let sv = self.data(s)[0];
        let out = self.data(x).iter().map(|v| v + sv).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddScalar { x, s }, rg))
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is masked out.
    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Var {
        let (m, n) = self.dims(x);
        let d = self.data(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let lim = if causal { (i + 1).min(n) } else { n };
            let row = &d[i * n..i * n + lim];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..lim {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                z += e;
            }
            for j in 0..lim {
                out[i * n + j] /= z;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out).unwrap(), Op::Softmax(x), rg)
    }

    /// Per-row normalization followed by the affine `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.nodes[gamma.0].value.len() != n || self.nodes[beta.0].value.len() != n {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let d = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &d[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = g[j] * h + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - rate)`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut ChaCha8Rng) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.nodes[x.0].value.len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out).unwrap(), Op::Dropout { x, mask }, rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| gelu_parts(v).0).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out).unwrap(), Op::Gelu(x), rg)
    }

    /// 1-D convolution along rows. `x` is `T x c_in`, `w` is `c_out x (c_in * k)`
    /// laid out channel-major (`w[o, c * k + j]`), `b` has `c_out` entries.
    /// Circular kernels are centered: tap `j` reads offset `j - k/2`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, k: usize, padding: ConvPadding) -> Result<Var> {
        let (t_len, c_in) = self.dims(x);
        let (c_out, wk) = self.dims(w);
        if wk != c_in * k || self.nodes[b.0].value.len() != c_out || k == 0 {
            return Err(shape_err("conv1d", self.shape(x), self.shape(w)));
        }
        let mut src = Vec::with_capacity(t_len * k);
        for t in 0..t_len {
            for j in 0..k {
                src.push(match padding {
                    ConvPadding::Circular { segment } => {
                        if segment == 0 || t_len % segment != 0 {
                            return Err(shape_err("conv1d segment", self.shape(x), &[segment]));
                        }
                        let base = t - t % segment;
                        let pos = (t % segment) as isize + j as isize - (k / 2) as isize;
                        Some(base + pos.rem_euclid(segment as isize) as usize)
                    }
                    ConvPadding::Causal => (t + j + 1).checked_sub(k),
                });
            }
        }
        let xd = self.data(x);
        let mut cols = vec![0.0; t_len * c_in * k];
        for t in 0..t_len {
            for j in 0..k {
                if let Some(s) = src[t * k + j] {
                    for c in 0..c_in {
                        cols[t * c_in * k + c * k + j] = xd[s * c_in + c];
                    }
                }
            }
        }
        let mut out = vec![0.0; t_len * c_out];
        gemm(&cols, self.data(w), &mut out, t_len, c_in * k, c_out, false, true);
        let bd = self.data(b);
        for t in 0..t_len {
            for o in 0..c_out {
                out[t * c_out + o] += bd[o];
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(vec![t_len, c_out], out)?, Op::Conv1d { x, w, b, cols, src, k }, rg))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table);
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(format!("embedding id {bad} out of vocabulary {v}")));
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(Tensor::new(vec![ids.len(), d], out)?, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.dims(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != cols {
                return Err(shape_err("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            out.extend_from_slice(self.data(p));
            rows += r;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.dims(parts[0]).0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != rows {
                return Err(shape_err("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            total += c;
        }
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for &p in parts {
            let (_, c) = self.dims(p);
            let d = self.data(p);
            for i in 0..rows {
                out[i * total + off..i * total + off + c].copy_from_slice(&d[i * c..(i + 1) * c]);
            }
            off += c;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![rows, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start > end || end > m {
            return Err(shape_err("slice_rows", self.shape(x), &[start, end]));
        }
        let out = self.data(x)[start * n..end * n].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![end - start, n], out)?, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start > end || end > n {
            return Err(shape_err("slice_cols", self.shape(x), &[start, end]));
        }
        let w = end - start;
        let d = self.data(x);
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&d[i * n + start..i * n + end]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![m, w], out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len().max(1) as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|v| v.abs()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out).unwrap(), Op::Abs(x), rg)
    }

    /// Elementwise `r^2/2` for `|r| <= delta`, else `delta (|r| - delta/2)`.
    pub fn huber(&mut self, x: Var, delta: f64) -> Var {
        let out = self.data(x).iter().map(|&r| huber_value(r, delta)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out).unwrap(), Op::Huber { x, delta }, rg)
    }

    /// Gradients of the one-element `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(shape_err("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), data).expect("gradient shape")
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.dims(*a);
                let n = node.value.dims2().1;
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    // trans_b: b is n x k, da = g b ; else b is k x n, da = g b^T
                    gemm(gd, self.data(*b), &mut da, m, n, k, false, !*trans_b);
                    self.acc(grads, *a, self.like(*a, da));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    if *trans_b {
                        gemm(gd, self.data(*a), &mut db, n, m, k, true, false);
                    } else {
                        gemm(self.data(*a), gd, &mut db, k, m, n, true, false);
                    }
                    self.acc(grads, *b, self.like(*b, db));
                }
            }
            Op::Transpose(x) => {
                let (m, n) = self.dims(*x);
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        dx[r * n + c] = gd[c * m + r];
                    }
                }
                self.acc(grads, *x, self.like(*x, dx));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, self.like(*b, gd.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d = gd.iter().zip(self.data(*b)).map(|(g, y)| g * y).collect();
                    self.acc(grads, *a, self.like(*a, d));
                }
                if self.rg(*b) {
                    let d = gd.iter().zip(self.data(*a)).map(|(g, x)| g * x).collect();
                    self.acc(grads, *b, self.like(*b, d));
                }
            }
            Op::AddRow { x, row } => {
                self.acc(grads, *x, g.clone());
                if self.rg(*row) {
                    let (m, n) = self.dims(*x);
                    let mut dr = vec![0.0; n];
                    for r in 0..m {
                        for (d, v) in dr.iter_mut().zip(&gd[r * n..(r + 1) * n]) {
                            *d += v;
                        }
                    }
                    self.acc(grads, *row, self.like(*row, dr));
                }
            }
            Op::Scale { x, c } => {
                self.acc(grads, *x, self.like(*x, gd.iter().map(|v| v * c).collect()));
            }
            Op::MulScalar { x, s } => {
                let sv = self.data(*s)[0];
                if self.rg(*x) {
                    self.acc(grads, *x, self.like(*x, gd.iter().map(|v| v * sv).collect()));
                }
                if self.rg(*s) {
                    let ds: f64 = gd.iter().zip(self.data(*x)).map(|(g, v)| g * v).sum();
                    self.acc(grads, *s, self.like(*s, vec![ds]));
                }
            }
            Op::AddScalar { x, s } => {
                self.acc(grads, *x, g.clone());
                if self.rg(*s) {
                    self.acc(grads, *s, self.like(*s, vec![gd.iter().sum()]));
                }
            }
            Op::Softmax(x) => {
                let (m, n) = self.dims(*x);
                let y = node.value.data();
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &gd[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *x, self.like(*x, dx));
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (m, n) = self.dims(*x);
                let gam = self.data(*gamma);
                if self.rg(*x) {
                    let mut dx = vec![0.0; m * n];
                    for r in 0..m {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            let dh = gd[r * n + j] * gam[j];
                            s1 += dh;
                            s2 += dh * xhat[r * n + j];
                        }
                        for j in 0..n {
                            let dh = gd[r * n + j] * gam[j];
                            dx[r * n + j] =
                                inv_std[r] / n as f64 * (n as f64 * dh - s1 - xhat[r * n + j] * s2);
                        }
                    }
                    self.acc(grads, *x, self.like(*x, dx));
                }
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for r in 0..m {
                        for j in 0..n {
                            dg[j] += gd[r * n + j] * xhat[r * n + j];
                            db[j] += gd[r * n + j];
                        }
                    }
                    self.acc(grads, *gamma, self.like(*gamma, dg));
                    self.acc(grads, *beta, self.like(*beta, db));
                }
            }
            Op::Dropout { x, mask } => {
                self.acc(grads, *x, self.like(*x, gd.iter().zip(mask).map(|(g, m)| g * m).collect()));
            }
            Op::Gelu(x) => {
                let d = gd.iter().zip(self.data(*x)).map(|(g, &v)| g * gelu_parts(v).1).collect();
                self.acc(grads, *x, self.like(*x, d));
            }
            Op::Conv1d { x, w, b, cols, src, k } => {
                let (t_len, c_in) = self.dims(*x);
                let (c_out, wk) = self.dims(*w);
                if self.rg(*w) {
                    let mut dw = vec![0.0; c_out * wk];
                    gemm(gd, cols, &mut dw, c_out, t_len, wk, true, false);
                    self.acc(grads, *w, self.like(*w, dw));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; c_out];
                    for t in 0..t_len {
                        for o in 0..c_out {
                            db[o] += gd[t * c_out + o];
                        }
                    }
                    self.acc(grads, *b, self.like(*b, db));
                }
                if self.rg(*x) {
                    let mut dcols = vec![0.0; t_len * wk];
                    gemm(gd, self.data(*w), &mut dcols, t_len, c_out, wk, false, false);
                    let mut dx = vec![0.0; t_len * c_in];
                    for t in 0..t_len {
                        for j in 0..*k {
                            if let Some(s) = src[t * k + j] {
                                for c in 0..c_in {
                                    dx[s * c_in + c] += dcols[t * wk + c * k + j];
                                }
                            }
                        }
                    }
                    self.acc(grads, *x, self.like(*x, dx));
                }
            }
            Op::Embedding { table, ids } => {
                let (v, d) = self.dims(*table);
                let mut dt = vec![0.0; v * d];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += gd[r * d + j];
                    }
                }
                self.acc(grads, *table, self.like(*table, dt));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    self.acc(grads, p, self.like(p, gd[off..off + len].to_vec()));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.dims2();
                let mut off = 0;
                for &p in parts {
                    let (_, c) = self.dims(p);
                    let mut d = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        d.extend_from_slice(&gd[r * total + off..r * total + off + c]);
                    }
                    self.acc(grads, p, self.like(p, d));
                    off += c;
                }
            }
            Op::SliceRows { x, start } => {
                let (_, n) = self.dims(*x);
                let mut dx = vec![0.0; self.nodes[x.0].value.len()];
                dx[start * n..start * n + gd.len()].copy_from_slice(gd);
                self.acc(grads, *x, self.like(*x, dx));
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.dims(*x);
                let w = node.value.dims2().1;
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    dx[r * n + start..r * n + start + w].copy_from_slice(&gd[r * w..(r + 1) * w]);
                }
                self.acc(grads, *x, self.like(*x, dx));
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.len();
                self.acc(grads, *x, self.like(*x, vec![gd[0]; n]));
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len();
                self.acc(grads, *x, self.like(*x, vec![gd[0] / n.max(1) as f64; n]));
            }
            Op::Abs(x) => {
                let d = gd.iter().zip(self.data(*x)).map(|(g, v)| g * sign(*v)).collect();
                self.acc(grads, *x, self.like(*x, d));
            }
            Op::Huber { x, delta } => {
                let d = gd
                    .iter()
                    .zip(self.data(*x))
                    .map(|(g, &r)| g * if r.abs() <= *delta { r } else { delta * sign(r) })
                    .collect();
                self.acc(grads, *x, self.like(*x, d));
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn huber_value(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        0.5 * r * r
    } else {
        delta * (r.abs() - 0.5 * delta)
    }
}

#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient per stored parameter (`None` where the parameter was unused
    /// or is frozen).
    pub fn for_params(&self, tape: &Tape, store: &ParamStore) -> Vec<Option<Tensor>> {
        (0..store.len())
            .map(|i| {
                tape.param_vars
                    .get(i)
                    .copied()
                    .flatten()
                    .filter(|v| tape.rg(*v))
                    .and_then(|v| self.grads[v.0].clone())
            })
            .collect()
    }
}
