//! Tape-based reverse-mode automatic differentiation.
//!
//! The [`Tape`] records every operation during the forward pass; operation
//! inputs always precede their outputs, so the node list is a topological
//! order by construction. [`Tape::backward`] replays the list in exact
//! reverse recording order, accumulating gradients additively across
//! fan-out. Gradients persist until [`Tape::zero_grads`]; callers running
//! several backward passes on one tape must zero in between.
//!
//! All math is 64-bit. Forward and backward are sequential with fixed
//! reduction order, so results are bitwise reproducible.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};

/// Row norms below this floor are treated as degenerate by
/// [`Tape::l2_normalize_rows`]: the row passes through unchanged.
pub const NORM_FLOOR: f64 = 1e-12;

/// Layer-norm variance epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Storage {
    Owned(Tensor),
    Shared(Arc<Tensor>),
}

impl Storage {
    fn tensor(&self) -> &Tensor {
        match self {
            Storage::Owned(t) => t,
            Storage::Shared(t) => t,
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    Transpose(Var),
    /// Column-wise scaling: `out[i][j] = a[i][j] * s[j]`.
    ScaleCols(Var, Var),
    SoftmaxRows(Var),
    L2NormalizeRows(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    RowSlice(Var, usize),
    SumAll(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        mean: bool,
    },
    /// Differentiable spectral entropy of `sigma` under p_i = sigma_i^2 / sum sigma_j^2.
    SigmaEntropy(Var),
}

struct Node {
    value: Storage,
    op: Op,
    needs_grad: bool,
}

/// Recorded forward computation plus its gradient buffers.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Storage::Owned(value),
            op,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Untracked input: no gradient is computed for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Tracked leaf: `backward` populates its gradient.
    pub fn tracked(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Storage::Shared(value),
            op: Op::Leaf,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Untracked leaf sharing its buffer with the caller (no copy).
    pub fn constant_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.push_shared(value, false)
    }

    /// Tracked leaf sharing its buffer with the caller (no copy).
    pub fn tracked_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.push_shared(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.tensor()
    }

    /// Value of a scalar node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    /// Gradient of `v`, if one was populated by `backward`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| {
            Tensor::from_vec(self.value(v).shape().to_vec(), g.clone())
                .expect("grad buffer shape-matches its node")
        })
    }

    pub fn grad_slice(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ── forward operations ─────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("sub", ta.shape(), tb.shape()));
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), needs))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", ta.shape(), tb.shape()));
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let data: Vec<f64> = ta.data().iter().map(|x| x * c).collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, c), needs)
    }

    /// Matrix product of two 2-D nodes; backward is dA = dC Bᵀ, dB = Aᵀ dC.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let value = ta.matmul(tb)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Matmul(a, b), needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(Error::shape("transpose", ta.shape(), &[]));
        }
        let value = ta.transposed();
        let needs = self.needs(a);
        Ok(self.push(value, Op::Transpose(a), needs))
    }

    /// `out[i][j] = a[i][j] * s[j]` — right-multiplication by diag(s).
    pub fn scale_cols(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(s));
        if ta.shape().len() != 2 || ts.shape().len() != 1 || ts.len() != ta.cols() {
            return Err(Error::shape("scale_cols", ta.shape(), ts.shape()));
        }
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, &f) in row.iter_mut().zip(ts.data()) {
                *v *= f;
            }
        }
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(s);
        Ok(self.push(value, Op::ScaleCols(a, s), needs))
    }

    /// Row-wise softmax with max subtraction; every output row sums to 1.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(Error::shape("softmax_rows", ta.shape(), &[]));
        }
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::SoftmaxRows(a), needs))
    }

    /// Row-wise ℓ2 normalization. Rows with norm below [`NORM_FLOOR`] pass
    /// through unchanged.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(Error::shape("l2_normalize_rows", ta.shape(), &[]));
        }
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm >= NORM_FLOOR {
                for v in row.iter_mut() {
                    *v /= norm;
                }
            }
        }
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::L2NormalizeRows(a), needs))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data: Vec<f64> = ta.data().iter().map(|&x| x * gauss_cdf(x)).collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(a);
        self.push(value, Op::Gelu(a), needs)
    }

    /// Row-wise layer normalization with learnable scale and offset,
    /// epsilon [`LAYER_NORM_EPS`].
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        if tx.shape().len() != 2 {
            return Err(Error::shape("layer_norm", tx.shape(), &[]));
        }
        let d = tx.cols();
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::shape("layer_norm params", tg.shape(), tb.shape()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d) {
            let (mean, rstd) = row_mean_rstd(row);
            for (j, v) in row.iter_mut().enumerate() {
                *v = tg.data()[j] * (*v - mean) * rstd + tb.data()[j];
            }
        }
        let value = Tensor::from_vec(tx.shape().to_vec(), data)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta }, needs))
    }

    /// Stacks 2-D nodes with equal column counts, top to bottom.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero parts".into()));
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            let tp = self.value(p);
            if tp.shape().len() != 2 || tp.cols() != cols {
                return Err(Error::shape("concat_rows", &[rows, cols], tp.shape()));
            }
            rows += tp.rows();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::from_vec(vec![rows, cols], data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), needs))
    }

    /// Concatenates 2-D nodes with equal row counts, left to right.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero parts".into()));
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let tp = self.value(p);
            if tp.shape().len() != 2 || tp.rows() != rows {
                return Err(Error::shape("concat_cols", &[rows, cols], tp.shape()));
            }
            cols += tp.cols();
        }
        let mut data = vec![0.0; rows * cols];
        let mut offset = 0;
        for &p in parts {
            let tp = self.value(p);
            let w = tp.cols();
            for i in 0..rows {
                data[i * cols + offset..i * cols + offset + w]
                    .copy_from_slice(&tp.data()[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let value = Tensor::from_vec(vec![rows, cols], data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), needs))
    }

    /// Extracts row `i` of a 2-D node as a 1 x cols node.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 2 || i >= ta.rows() {
            return Err(Error::Contract(format!(
                "row {i} out of range for shape {:?}",
                ta.shape()
            )));
        }
        let value = Tensor::from_vec(vec![1, ta.cols()], ta.row(i).to_vec())?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::RowSlice(a, i), needs))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(total), Op::SumAll(a), needs)
    }

    /// Cross-entropy of logits against integer labels, computed with the
    /// log-sum-exp trick. `mean` averages over the batch; otherwise sums.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], mean: bool) -> Result<Var> {
        let tl = self.value(logits);
        if tl.shape().len() != 2 || tl.rows() != labels.len() {
            return Err(Error::shape("cross_entropy", tl.shape(), &[labels.len()]));
        }
        let classes = tl.cols();
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut total = 0.0;
        for (b, &label) in labels.iter().enumerate() {
            let row = tl.row(b);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        if mean {
            total /= labels.len() as f64;
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                mean,
            },
            needs,
        ))
    }

    /// Differentiable spectral entropy of a 1-D node under the squared
    /// parameterization p_i = σ_i² / Σ σ_j². All-zero input yields 0 with a
    /// zero gradient.
    pub fn sigma_entropy(&mut self, sigma: Var) -> Result<Var> {
        let ts = self.value(sigma);
        if ts.shape().len() != 1 {
            return Err(Error::shape("sigma_entropy", ts.shape(), &[]));
        }
        let total: f64 = ts.data().iter().map(|v| v * v).sum();
        let mut h = 0.0;
        if total > 0.0 {
            for &v in ts.data() {
                let p = v * v / total;
                if p > 0.0 {
                    h -= p * p.ln();
                }
            }
        }
        let needs = self.needs(sigma);
        Ok(self.push(Tensor::scalar(h), Op::SigmaEntropy(sigma), needs))
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Populates gradients of every tracked node reachable from `loss`.
    /// Gradients accumulate additively; see [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.needs(loss) {
            return Err(Error::Contract(
                "loss is not reachable from any tracked tensor".into(),
            ));
        }
        accum(&mut self.grads, loss.0, 1, &[1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.apply_backward(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn apply_backward(&mut self, idx: usize, g: &[f64]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                if self.needs(a) {
                    accum(&mut self.grads, a.0, g.len(), g);
                }
                if self.needs(b) {
                    accum(&mut self.grads, b.0, g.len(), g);
                }
            }
            &Op::Sub(a, b) => {
                if self.needs(a) {
                    accum(&mut self.grads, a.0, g.len(), g);
                }
                if self.needs(b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accum(&mut self.grads, b.0, g.len(), &neg);
                }
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(self.value(b).data())
                        .map(|(gv, bv)| gv * bv)
                        .collect();
                    accum(&mut self.grads, a.0, db.len(), &db);
                }
                if self.needs(b) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(gv, av)| gv * av)
                        .collect();
                    accum(&mut self.grads, b.0, da.len(), &da);
                }
            }
            &Op::Scale(a, c) => {
                if self.needs(a) {
                    let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                    accum(&mut self.grads, a.0, da.len(), &da);
                }
            }
            &Op::Matmul(a, b) => {
                let (m, k) = (self.value(a).rows(), self.value(a).cols());
                let n = self.value(b).cols();
                if self.needs(a) {
                    let mut da = vec![0.0; m * k];
                    matmul_nt_into(&mut da, g, self.value(b).data(), m, n, k);
                    accum(&mut self.grads, a.0, da.len(), &da);
                }
                if self.needs(b) {
                    let mut db = vec![0.0; k * n];
                    matmul_tn_into(&mut db, self.value(a).data(), g, m, k, n);
                    accum(&mut self.grads, b.0, db.len(), &db);
                }
            }
            &Op::Transpose(a) => {
                if self.needs(a) {
                    let (m, n) = (self.value(a).rows(), self.value(a).cols());
                    // node value is n x m, so g is n x m; transpose back.
                    let mut da = vec![0.0; m * n];
                    for i in 0..n {
                        for j in 0..m {
                            da[j * n + i] = g[i * m + j];
                        }
                    }
                    accum(&mut self.grads, a.0, da.len(), &da);
                }
            }
            &Op::ScaleCols(a, s) => {
                let n = self.value(a).cols();
                if self.needs(a) {
                    let sv = self.value(s).data().to_vec();
                    let mut da = g.to_vec();
                    for row in da.chunks_mut(n) {
                        for (v, &f) in row.iter_mut().zip(&sv) {
                            *v *= f;
                        }
                    }
                    accum(&mut self.grads, a.0, da.len(), &da);
                }
                if self.needs(s) {
                    let av = self.value(a).data();
                    let mut ds = vec![0.0; n];
                    for (grow, arow) in g.chunks(n).zip(av.chunks(n)) {
                        for j in 0..n {
                            ds[j] += grow[j] * arow[j];
                        }
                    }
                    accum(&mut self.grads, s.0, n, &ds);
                }
            }
            &Op::SoftmaxRows(a) => {
                if self.needs(a) {
                    let y = self.value(Var(idx)).data();
                    let n = self.value(Var(idx)).cols();
                    let mut da = vec![0.0; g.len()];
                    for ((drow, grow), yrow) in da.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(gv, yv)| gv * yv).sum();
                        for j in 0..n {
                            drow[j] = yrow[j] * (grow[j] - dot);
                        }
                    }
                    accum(&mut self.grads, a.0, da.len(), &da);
                }
            }
            &Op::L2NormalizeRows(a) => {
                if self.needs(a) {
                    let x = self.value(a).data();
                    let y = self.value(Var(idx)).data();
                    let n = self.value(a).cols();
                    let mut da = vec![0.0; g.len()];
                    for i in 0..x.len() / n {
                        let xr = &x[i * n..(i + 1) * n];
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dr = &mut da[i * n..(i + 1) * n];
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm >= NORM_FLOOR {
                            let dot: f64 = gr.iter().zip(yr).map(|(gv, yv)| gv * yv).sum();
                            for j in 0..n {
                                dr[j] = (gr[j] - dot * yr[j]) / norm;
                            }
                        } else {
                            dr.copy_from_slice(gr);
                        }
                    }
                    accum(&mut self.grads, a.0, da.len(), &da);
                }
            }
            &Op::Gelu(a) => {
                if self.needs(a) {
                    let x = self.value(a).data();
                    let da: Vec<f64> = g
                        .iter()
                        .zip(x)
                        .map(|(gv, &xv)| gv * (gauss_cdf(xv) + xv * gauss_pdf(xv)))
                        .collect();
                    accum(&mut self.grads, a.0, da.len(), &da);
                }
            }
            &Op::LayerNorm { x, gamma, beta } => {
                let xv = self.value(x).data();
                let gv = self.value(gamma).data();
                let d = self.value(x).cols();
                let rows = xv.len() / d;
                let needs_x = self.needs(x);
                let needs_g = self.needs(gamma);
                let needs_b = self.needs(beta);
                let mut dx = if needs_x { vec![0.0; xv.len()] } else { vec![] };
                let mut dgamma = if needs_g { vec![0.0; d] } else { vec![] };
                let mut dbeta = if needs_b { vec![0.0; d] } else { vec![] };
                for i in 0..rows {
                    let xr = &xv[i * d..(i + 1) * d];
                    let gr = &g[i * d..(i + 1) * d];
                    let (mean, rstd) = row_mean_rstd(xr);
                    if needs_b {
                        for j in 0..d {
                            dbeta[j] += gr[j];
                        }
                    }
                    if needs_g {
                        for j in 0..d {
                            dgamma[j] += gr[j] * (xr[j] - mean) * rstd;
                        }
                    }
                    if needs_x {
                        // h = dy * gamma; dx = rstd * (h - mean(h) - x_hat * mean(h * x_hat))
                        let mut h_mean = 0.0;
                        let mut hx_mean = 0.0;
                        for j in 0..d {
                            let h = gr[j] * gv[j];
                            h_mean += h;
                            hx_mean += h * (xr[j] - mean) * rstd;
                        }
                        h_mean /= d as f64;
                        hx_mean /= d as f64;
                        let dxr = &mut dx[i * d..(i + 1) * d];
                        for j in 0..d {
                            let h = gr[j] * gv[j];
                            let xhat = (xr[j] - mean) * rstd;
                            dxr[j] = rstd * (h - h_mean - xhat * hx_mean);
                        }
                    }
                }
                if needs_x {
                    accum(&mut self.grads, x.0, dx.len(), &dx);
                }
                if needs_g {
                    accum(&mut self.grads, gamma.0, d, &dgamma);
                }
                if needs_b {
                    accum(&mut self.grads, beta.0, d, &dbeta);
                }
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let cols = self.value(Var(idx)).cols();
                let mut offset = 0;
                for p in parts {
                    let rows = self.value(p).rows();
                    let chunk = &g[offset * cols..(offset + rows) * cols];
                    if self.needs(p) {
                        let chunk = chunk.to_vec();
                        accum(&mut self.grads, p.0, chunk.len(), &chunk);
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let cols = self.value(Var(idx)).cols();
                let rows = self.value(Var(idx)).rows();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        let mut dp = vec![0.0; rows * w];
                        for i in 0..rows {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&g[i * cols + offset..i * cols + offset + w]);
                        }
                        accum(&mut self.grads, p.0, dp.len(), &dp);
                    }
                    offset += w;
                }
            }
            &Op::RowSlice(a, i) => {
                if self.needs(a) {
                    let (rows, cols) = (self.value(a).rows(), self.value(a).cols());
                    let mut da = vec![0.0; rows * cols];
                    da[i * cols..(i + 1) * cols].copy_from_slice(g);
                    accum(&mut self.grads, a.0, da.len(), &da);
                }
            }
            &Op::SumAll(a) => {
                if self.needs(a) {
                    let da = vec![g[0]; self.value(a).len()];
                    accum(&mut self.grads, a.0, da.len(), &da);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                mean,
            } => {
                let logits = *logits;
                if self.needs(logits) {
                    let labels = labels.clone();
                    let mean = *mean;
                    let tl = self.value(logits);
                    let classes = tl.cols();
                    let w = if mean {
                        g[0] / labels.len() as f64
                    } else {
                        g[0]
                    };
                    let mut dl = vec![0.0; tl.len()];
                    for (b, &label) in labels.iter().enumerate() {
                        let row = tl.row(b);
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
                        let drow = &mut dl[b * classes..(b + 1) * classes];
                        for j in 0..classes {
                            drow[j] = w * (row[j] - max).exp() / sum;
                        }
                        drow[label] -= w;
                    }
                    accum(&mut self.grads, logits.0, dl.len(), &dl);
                }
            }
            &Op::SigmaEntropy(sigma) => {
                if self.needs(sigma) {
                    let sv = self.value(sigma).data();
                    let h = self.value(Var(idx)).item();
                    let total: f64 = sv.iter().map(|v| v * v).sum();
                    let mut ds = vec![0.0; sv.len()];
                    if total > 0.0 {
                        for (j, &v) in sv.iter().enumerate() {
                            let p = v * v / total;
                            if p > 0.0 {
                                ds[j] = g[0] * 2.0 * v * (-p.ln() - h) / total;
                            }
                        }
                    }
                    accum(&mut self.grads, sigma.0, ds.len(), &ds);
                }
            }
        }
    }
}

fn accum(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize, delta: &[f64]) {
    let buf = grads[idx].get_or_insert_with(|| vec![0.0; len]);
    debug_assert_eq!(buf.len(), delta.len());
    for (b, d) in buf.iter_mut().zip(delta) {
        *b += d;
    }
}

fn row_mean_rstd(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

/// Standard normal CDF, Φ(x) = ½(1 + erf(x/√2)).
fn gauss_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// Standard normal density.
fn gauss_pdf(x: f64) -> f64 {
    const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    (-0.5 * x * x).exp() * FRAC_1_SQRT_2PI
}
