//! Define-by-run reverse-mode autodiff.
//!
//! Every op appends a node holding its forward value plus whatever it needs for
//! the backward pass. Inputs always precede their consumers, so a reverse sweep
//! over node ids is a valid topological order. Leaves created with
//! [`Tape::constant`] never receive gradients, and neither does anything that
//! only depends on constants.

use crate::error::{FastError, Result};
use crate::numerics::tensor::{gemm, gemm_into, Tensor};

/// Probability floor used by [`Tape::kl_rows`] and [`crate::numerics::kl_divergence`].
pub const KL_FLOOR: f64 = 1e-12;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a packed batch of sequences for [`Tape::attention`].
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq_len: usize,
    pub heads: usize,
    /// `batch * seq_len` flags; padded keys are excluded from every softmax.
    pub key_valid: Vec<bool>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    SelectRows { x: Var, rows: Vec<usize> },
    OverwriteRows { x: Var, rows: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, layout: AttentionLayout, probs: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Gather { x: Var, idx: Vec<usize> },
    Abs(Var),
    Sum(Var),
    Mean(Var),
    KlRows { q: Var, p: Tensor },
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
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` for nodes that do not require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Number of nodes that carry a gradient.
    pub fn populated(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Frozen leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    /// `a · b` with `a: [.., k]`, `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = gemm(self.value(a), false, self.value(b), false)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, tb: false }, rg))
    }

    /// `a · bᵀ` with `a: [.., k]`, `b: [n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = gemm(self.value(a), false, self.value(b), true)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, tb: true }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    /// Adds a bias vector `[n]` to every row of `x: [.., n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.shape().len() != 1 || bv.len() != xv.cols() {
            return Err(FastError::dim("add_row", xv.shape(), bv.shape()));
        }
        let n = xv.cols();
        let mut out = xv.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv.data()[i % n];
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), gelu)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let value = softmax(self.value(x));
        let rg = self.rg(&[x]);
        self.push(value, Op::Softmax(x), rg)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of shape `[n]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.shape() != [n] || b.shape() != [n] {
            return Err(FastError::dim("layer_norm", xv.shape(), g.shape()));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; rows * n];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Row lookup `table[ids]` giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(FastError::Usage("embedding table must be 2-D".into()));
        }
        let (vocab, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(FastError::Input(format!("embedding id {id} out of range {vocab}")));
            }
            out.extend_from_slice(t.row(id));
        }
        let value = Tensor::matrix(ids.len(), d, out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Gathers rows of a 2-D `x`.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (n_rows, d) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n_rows {
                return Err(FastError::Input(format!("row {r} out of range {n_rows}")));
            }
            out.extend_from_slice(xv.row(r));
        }
        let value = Tensor::matrix(rows.len(), d, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Copy of `x` with `rows` replaced by the rows of the constant `replacement`.
    /// Gradient flows to `x` only through rows that were not replaced.
    pub fn overwrite_rows(&mut self, x: Var, rows: &[usize], replacement: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if replacement.cols() != d || replacement.rows() != rows.len() {
            return Err(FastError::dim("overwrite_rows", xv.shape(), replacement.shape()));
        }
        let mut out = xv.clone();
        for (k, &r) in rows.iter().enumerate() {
            if r >= xv.rows() {
                return Err(FastError::Input(format!("row {r} out of range {}", xv.rows())));
            }
            out.data_mut()[r * d..(r + 1) * d].copy_from_slice(replacement.row(k));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::OverwriteRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    /// `q`, `k`, `v` are `[batch * seq_len, d]`; heads split `d` evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: &AttentionLayout) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let rows = layout.batch * layout.seq_len;
        let d = qv.cols();
        if qv.shape() != [rows, d] || kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return Err(FastError::dim("attention", qv.shape(), kv.shape()));
        }
        if layout.heads == 0 || d % layout.heads != 0 || layout.key_valid.len() != rows {
            return Err(FastError::Usage(format!(
                "attention layout invalid for d={d}: {layout:?}"
            )));
        }
        let (t, h, dh) = (layout.seq_len, layout.heads, d / layout.heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; layout.batch * h * t * t];
        let mut out = vec![0.0; rows * d];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut scores = vec![0.0; t];
        for b in 0..layout.batch {
            for head in 0..h {
                let off = head * dh;
                for i in 0..t {
                    let qi = &qd[(b * t + i) * d + off..(b * t + i) * d + off + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..t {
                        if !layout.key_valid[b * t + j] {
                            continue;
                        }
                        let kj = &kd[(b * t + j) * d + off..(b * t + j) * d + off + dh];
                        let s = dot(qi, kj) * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let p = &mut probs[((b * h + head) * t + i) * t..((b * h + head) * t + i + 1) * t];
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut z = 0.0;
                    for j in 0..t {
                        if layout.key_valid[b * t + j] {
                            p[j] = (scores[j] - max).exp();
                            z += p[j];
                        }
                    }
                    let o = &mut out[(b * t + i) * d + off..(b * t + i) * d + off + dh];
                    for j in 0..t {
                        if p[j] == 0.0 {
                            continue;
                        }
                        p[j] /= z;
                        let vj = &vd[(b * t + j) * d + off..(b * t + j) * d + off + dh];
                        for (oo, vvv) in o.iter_mut().zip(vj) {
                            *oo += p[j] * vvv;
                        }
                    }
                }
            }
        }
        let value = Tensor::matrix(rows, d, out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                layout: layout.clone(),
                probs,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)` (one row per target).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, n) = (lv.rows(), lv.cols());
        if rows != targets.len() || rows == 0 {
            return Err(FastError::dim("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let probs = softmax(lv);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= n {
                return Err(FastError::Input(format!("target {t} out of range {n}")));
            }
            // log-softmax directly for accuracy
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        let value = Tensor::scalar(loss / rows as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs: probs.into_data(),
            },
            rg,
        ))
    }

    /// Flat element gather giving a vector `[idx.len()]`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx {
            out.push(
                *xv.data()
                    .get(i)
                    .ok_or_else(|| FastError::Input(format!("gather index {i} out of range {}", xv.len())))?,
            );
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::vector(out),
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(FastError::Usage("mean of empty tensor".into()));
        }
        let value = Tensor::scalar(xv.sum() / xv.len() as f64);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Mean(x), rg))
    }

    /// Row-wise `KL(p ‖ q)` against a constant reference `p`; `q` is floored at [`KL_FLOOR`].
    pub fn kl_rows(&mut self, p: &Tensor, q: Var) -> Result<Var> {
        let qv = self.value(q);
        if p.shape() != qv.shape() {
            return Err(FastError::dim("kl_rows", p.shape(), qv.shape()));
        }
        let out: Vec<f64> = (0..qv.rows())
            .map(|r| kl_row(p.row(r), qv.row(r)))
            .collect();
        let rg = self.rg(&[q]);
        Ok(self.push(
            Tensor::vector(out),
            Op::KlRows { q, p: p.clone() },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(FastError::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                rv.shape()
            )));
        }
        if !rv.is_finite() {
            return Err(FastError::NonFinite("backward root".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter_mut().enumerate() {
            if self.nodes[i].requires_grad && g.is_none() {
                *g = Some(Tensor::zeros(self.nodes[i].value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, tb } => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.requires_grad(a) {
                    // dA = G · op(B)ᵀ
                    let ga = gemm(g, false, bv, !tb).expect("matmul grad shapes");
                    let ga = ga.reshape(av.shape().to_vec()).expect("matmul grad reshape");
                    self.accumulate(grads, a, ga);
                }
                if self.requires_grad(b) {
                    let (m, k, n) = (av.rows(), av.cols(), g.cols());
                    let mut gb = vec![0.0; k * n];
                    if tb {
                        // B is [n, k]: dB = Gᵀ · A
                        gemm_into(g.data(), true, n, av.data(), false, k, n, m, k, 0.0, &mut gb);
                    } else {
                        gemm_into(av.data(), true, k, g.data(), false, n, k, m, n, 0.0, &mut gb);
                    }
                    let gb = Tensor::new(bv.shape().to_vec(), gb).expect("matmul grad shape");
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|v| -v));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.requires_grad(a) {
                    self.accumulate(grads, a, g.zip_map(bv, "mul", |x, y| x * y).unwrap());
                }
                if self.requires_grad(b) {
                    self.accumulate(grads, b, g.zip_map(av, "mul", |x, y| x * y).unwrap());
                }
            }
            &Op::Scale(x, s) => self.accumulate(grads, x, g.map(|v| v * s)),
            &Op::AddRow(x, bias) => {
                self.accumulate(grads, x, g.clone());
                if self.requires_grad(bias) {
                    let n = g.cols();
                    let mut gb = vec![0.0; n];
                    for (k, v) in g.data().iter().enumerate() {
                        gb[k % n] += v;
                    }
                    self.accumulate(grads, bias, Tensor::vector(gb));
                }
            }
            &Op::Relu(x) => {
                let xv = self.value(x);
                let gx = g.zip_map(xv, "relu", |gv, v| if v > 0.0 { gv } else { 0.0 }).unwrap();
                self.accumulate(grads, x, gx);
            }
            &Op::Gelu(x) => {
                let xv = self.value(x);
                let gx = g.zip_map(xv, "gelu", |gv, v| gv * gelu_grad(v)).unwrap();
                self.accumulate(grads, x, gx);
            }
            &Op::Abs(x) => {
                let xv = self.value(x);
                let gx = g.zip_map(xv, "abs", |gv, v| gv * sign(v)).unwrap();
                self.accumulate(grads, x, gx);
            }
            &Op::Softmax(x) => {
                let n = y.cols();
                let mut gx = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let s = dot(yr, gr);
                    for j in 0..n {
                        gx[r * n + j] = yr[j] * (gr[j] - s);
                    }
                }
                self.accumulate(grads, x, Tensor::new(y.shape().to_vec(), gx).unwrap());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = y.cols();
                let gam = self.value(*gamma).data();
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut gg = vec![0.0; n];
                    let mut gbeta = vec![0.0; n];
                    for (k, gv) in g.data().iter().enumerate() {
                        gg[k % n] += gv * xhat[k];
                        gbeta[k % n] += gv;
                    }
                    self.accumulate(grads, *gamma, Tensor::vector(gg));
                    self.accumulate(grads, *beta, Tensor::vector(gbeta));
                }
                if self.requires_grad(*x) {
                    let mut gx = vec![0.0; y.len()];
                    let nf = n as f64;
                    for r in 0..y.rows() {
                        let gr = g.row(r);
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            let dxh = gr[j] * gam[j];
                            s1 += dxh;
                            s2 += dxh * xh[j];
                        }
                        for j in 0..n {
                            let dxh = gr[j] * gam[j];
                            gx[r * n + j] = inv_std[r] / nf * (nf * dxh - s1 - xh[j] * s2);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), gx).unwrap());
                }
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.cols();
                let mut gt = Tensor::zeros(tv.shape());
                let gd = gt.data_mut();
                for (k, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gd[id * d + j] += g.data()[k * d + j];
                    }
                }
                self.accumulate(grads, *table, gt);
            }
            Op::SelectRows { x, rows } => {
                let xv = self.value(*x);
                let d = xv.cols();
                let mut gx = Tensor::zeros(xv.shape());
                let gd = gx.data_mut();
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        gd[r * d + j] += g.data()[k * d + j];
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::OverwriteRows { x, rows } => {
                let d = y.cols();
                let mut gx = g.clone();
                for &r in rows {
                    gx.data_mut()[r * d..(r + 1) * d].fill(0.0);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => self.attention_backward(g, *q, *k, *v, layout, probs, grads),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let gv = g.data()[0] / targets.len() as f64;
                let n = self.value(*logits).cols();
                let mut gl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * n + t] -= 1.0;
                }
                for v in gl.iter_mut() {
                    *v *= gv;
                }
                let shape = self.value(*logits).shape().to_vec();
                self.accumulate(grads, *logits, Tensor::new(shape, gl).unwrap());
            }
            Op::Gather { x, idx } => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                for (k, &i) in idx.iter().enumerate() {
                    gx.data_mut()[i] += g.data()[k];
                }
                self.accumulate(grads, *x, gx);
            }
            &Op::Sum(x) => {
                let gv = g.data()[0];
                self.accumulate(grads, x, Tensor::full(self.value(x).shape(), gv));
            }
            &Op::Mean(x) => {
                let xv = self.value(x);
                let gv = g.data()[0] / xv.len() as f64;
                self.accumulate(grads, x, Tensor::full(xv.shape(), gv));
            }
            Op::KlRows { q, p } => {
                let qv = self.value(*q);
                let n = qv.cols();
                let mut gq = vec![0.0; qv.len()];
                for r in 0..qv.rows() {
                    for j in 0..n {
                        let (pj, qj) = (p.data()[r * n + j], qv.data()[r * n + j]);
                        if pj > 0.0 && qj >= KL_FLOOR {
                            gq[r * n + j] = -g.data()[r] * pj / qj;
                        }
                    }
                }
                self.accumulate(grads, *q, Tensor::new(qv.shape().to_vec(), gq).unwrap());
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Tensor,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        probs: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let (t, h) = (layout.seq_len, layout.heads);
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd, gd) = (qv.data(), kv.data(), vv.data(), g.data());
        let mut gq = vec![0.0; qv.len()];
        let mut gk = vec![0.0; kv.len()];
        let mut gvv = vec![0.0; vv.len()];
        let mut dp = vec![0.0; t];
        for b in 0..layout.batch {
            for head in 0..h {
                let off = head * dh;
                for i in 0..t {
                    let p = &probs[((b * h + head) * t + i) * t..((b * h + head) * t + i + 1) * t];
                    let gi = &gd[(b * t + i) * d + off..(b * t + i) * d + off + dh];
                    let mut s = 0.0;
                    for j in 0..t {
                        if p[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let row = (b * t + j) * d + off;
                        dp[j] = dot(gi, &vd[row..row + dh]);
                        s += p[j] * dp[j];
                        for (gv, gg) in gvv[row..row + dh].iter_mut().zip(gi) {
                            *gv += p[j] * gg;
                        }
                    }
                    let qrow = (b * t + i) * d + off;
                    for j in 0..t {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - s) * scale;
                        let krow = (b * t + j) * d + off;
                        for c in 0..dh {
                            gq[qrow + c] += ds * kd[krow + c];
                            gk[krow + c] += ds * qd[qrow + c];
                        }
                    }
                }
            }
        }
        let shape = qv.shape().to_vec();
        self.accumulate(grads, q, Tensor::new(shape.clone(), gq).unwrap());
        self.accumulate(grads, k, Tensor::new(shape.clone(), gk).unwrap());
        self.accumulate(grads, v, Tensor::new(shape, gvv).unwrap());
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
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

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Softmax over the last axis with max subtraction.
pub fn softmax(x: &Tensor) -> Tensor {
    let n = x.cols();
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = &mut out.data_mut()[r * n..(r + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

pub(crate) fn kl_row(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(KL_FLOOR)).ln())
        .sum()
}
