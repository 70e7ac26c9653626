//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive eagerly: values are computed when an
//! op is added, and [`Graph::backward`] walks the tape in reverse. Parameters
//! are borrowed from a [`ParamStore`] rather than copied, and frozen
//! parameters never request gradients, so backward stops as soon as no
//! trainable parameter lies below a node.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::nn::tensor::{matmul, matmul_at_acc, matmul_bt_acc};
use crate::nn::{Gradients, ParamStore, Tensor};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(String),
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Tanh(usize),
    Sin(usize),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    CausalAttention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        seq_len: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Tanh(_) => "tanh",
            Op::Sin(_) => "sin",
            Op::Gelu(_) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::CausalAttention { .. } => "causal_attention",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'a> {
    params: &'a ParamStore,
    nodes: Vec<Node<'a>>,
    first_non_finite: Option<usize>,
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            first_non_finite: None,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        if self.first_non_finite.is_none() && !value.all_finite() {
            self.first_non_finite = Some(id);
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(id)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// A constant leaf; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Input, false)
    }

    /// Borrowed parameter leaf. Requests a gradient unless frozen.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let params = self.params;
        let t = params.require(name)?;
        let rg = !params.is_frozen(name);
        Ok(self.push(Cow::Borrowed(t), Op::Param(name.to_string()), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::contract(format!(
                "matmul shapes {sa:?} x {sb:?} do not align"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = Tensor::from_raw(vec![m, n], matmul(ta.data(), tb.data(), m, k, n));
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Cow::Owned(out), Op::MatMul(a.0, b.0), rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::contract(format!("{op}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::from_raw(ta.shape().to_vec(), data);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Cow::Owned(out), Op::Add(a.0, b.0), rg))
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.len() != tx.cols() {
            return Err(Error::contract(format!(
                "add_row: bias of {} entries for rows of width {}",
                tb.len(),
                tx.cols()
            )));
        }
        let n = tx.cols();
        let b = tb.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % n])
            .collect();
        let out = Tensor::from_raw(tx.shape().to_vec(), data);
        let rg = self.rg(&[x.0, bias.0]);
        Ok(self.push(Cow::Owned(out), Op::AddRow(x.0, bias.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_raw(ta.shape().to_vec(), data);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Cow::Owned(out), Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let out = Tensor::from_raw(ta.shape().to_vec(), ta.data().iter().map(|x| x * c).collect());
        let rg = self.rg(&[a.0]);
        self.push(Cow::Owned(out), Op::Scale(a.0, c), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a.0]);
        self.push(Cow::Owned(Tensor::scalar(s)), Op::Sum(a.0), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let out = Tensor::from_raw(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect());
        let rg = self.rg(&[a.0]);
        self.push(Cow::Owned(out), op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a.0))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Op::Gelu(a.0),
        )
    }

    /// Row-wise layer normalisation with affine `gamma`/`beta` of row width.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.cols();
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::contract("layer_norm: gamma/beta width mismatch"));
        }
        let rows = tx.rows();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; rows * n];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let out = Tensor::from_raw(tx.shape().to_vec(), out);
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            Cow::Owned(out),
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Selects rows `ids` of a `[V, d]` table into an `[ids.len(), d]` matrix.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::contract("gather: table must be a matrix"));
        }
        if ids.is_empty() {
            return Err(Error::contract("gather: no ids"));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::range(format!("gather: id {id} outside table of {v} rows")));
            }
            out.extend_from_slice(t.row(id));
        }
        let out = Tensor::from_raw(vec![ids.len(), d], out);
        let rg = self.rg(&[table.0]);
        Ok(self.push(
            Cow::Owned(out),
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Multi-head causal self-attention over a batch of equal-length
    /// sequences stacked row-wise: `q`, `k`, `v` are `[batch·seq_len, d]`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
    ) -> Result<Var> {
        self.same_shape(q, k, "causal_attention")?;
        self.same_shape(q, v, "causal_attention")?;
        let tq = self.value(q);
        let (rows, d) = (tq.rows(), tq.cols());
        if heads == 0 || d % heads != 0 || seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::contract(format!(
                "causal_attention: {rows}x{d} with {heads} heads and seq_len {seq_len}"
            )));
        }
        let (tk, tv) = (self.value(k), self.value(v));
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let batch = rows / seq_len;
        let mut probs = vec![0.0; batch * heads * seq_len * seq_len];
        let mut out = vec![0.0; rows * d];
        for b in 0..batch {
            let base = b * seq_len;
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq_len {
                    let qi = &qd[(base + i) * d + off..(base + i) * d + off + dh];
                    let prow = &mut probs[((b * heads + h) * seq_len + i) * seq_len..][..seq_len];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &kd[(base + j) * d + off..(base + j) * d + off + dh];
                        let s = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                        prow[j] = s;
                        max = max.max(s);
                    }
                    let mut z = 0.0;
                    for p in prow.iter_mut().take(i + 1) {
                        *p = (*p - max).exp();
                        z += *p;
                    }
                    let orow = &mut out[(base + i) * d + off..(base + i) * d + off + dh];
                    for j in 0..=i {
                        prow[j] /= z;
                        let vj = &vd[(base + j) * d + off..(base + j) * d + off + dh];
                        for (o, vv) in orow.iter_mut().zip(vj) {
                            *o += prow[j] * vv;
                        }
                    }
                }
            }
        }
        let out = Tensor::from_raw(tq.shape().to_vec(), out);
        let rg = self.rg(&[q.0, k.0, v.0]);
        Ok(self.push(
            Cow::Owned(out),
            Op::CausalAttention {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                seq_len,
                probs,
            },
            rg,
        ))
    }

    /// Weighted mean token cross-entropy. Rows with weight zero (padding)
    /// contribute nothing; at least one row must carry weight.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, vocab) = (t.rows(), t.cols());
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::contract(format!(
                "cross_entropy: {rows} logit rows, {} targets, {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let active = mask.iter().filter(|&&m| m).count();
        if active == 0 {
            return Err(Error::data("cross_entropy: every position is padding"));
        }
        let w = 1.0 / active as f64;
        let weights: Vec<f64> = mask.iter().map(|&m| if m { w } else { 0.0 }).collect();
        let mut probs = vec![0.0; rows * vocab];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = t.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + z.ln();
            for c in 0..vocab {
                probs[r * vocab + c] = (row[c] - lse).exp();
            }
            if mask[r] {
                let tgt = targets[r];
                if tgt >= vocab {
                    return Err(Error::range(format!("cross_entropy: target {tgt} >= vocab {vocab}")));
                }
                loss += w * (lse - row[tgt]);
            }
        }
        let rg = self.rg(&[logits.0]);
        Ok(self.push(
            Cow::Owned(Tensor::scalar(loss)),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                weights,
                probs,
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`. Returns gradients for every
    /// unfrozen parameter that the loss depends on; unfrozen parameters that
    /// were never touched get explicit zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        if let Some(id) = self.first_non_finite {
            if id <= loss.0 {
                return Err(Error::Numeric {
                    op: self.nodes[id].op.name().to_string(),
                });
            }
        }

        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        let mut out = Gradients::new();
        for (name, t) in self.params.iter() {
            if !self.params.is_frozen(name) {
                out.insert(name.to_string(), Tensor::zeros(t.shape()));
            }
        }

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        node: &Node<'a>,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) {
        let nodes = &self.nodes;
        let wants = |i: usize| nodes[i].requires_grad;
        fn slot<'g>(nodes: &[Node<'_>], grads: &'g mut [Option<Vec<f64>>], i: usize) -> Option<&'g mut Vec<f64>> {
            if !nodes[i].requires_grad {
                return None;
            }
            let len = nodes[i].value.len();
            Some(grads[i].get_or_insert_with(|| vec![0.0; len]))
        }

        match &node.op {
            Op::Input => {}
            Op::Param(name) => {
                if let Some(t) = out.get_mut(name) {
                    for (d, s) in t.data_mut().iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if let Some(ga) = slot(nodes, grads, *a) {
                    matmul_bt_acc(ga, g, tb.data(), m, k, n);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    matmul_at_acc(gb, ta.data(), g, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for i in [*a, *b] {
                    if let Some(gi) = slot(nodes, grads, i) {
                        gi.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if let Some(gb) = slot(nodes, grads, *bias) {
                    let n = gb.len();
                    for (i, s) in g.iter().enumerate() {
                        gb[i % n] += s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                if let Some(ga) = slot(nodes, grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * vb[i];
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * va[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += c * s);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            Op::Sin(a) => {
                let x = nodes[*a].value.data();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * x[i].cos();
                    }
                }
            }
            Op::Gelu(a) => {
                let x = nodes[*a].value.data();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for i in 0..g.len() {
                        let xi = x[i];
                        let u = GELU_C * (xi + 0.044715 * xi * xi * xi);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * xi * xi);
                        let d = 0.5 * (1.0 + th) + 0.5 * xi * (1.0 - th * th) * du;
                        ga[i] += g[i] * d;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gm = nodes[*gamma].value.data();
                let n = gm.len();
                let rows = rstd.len();
                if let Some(gg) = slot(nodes, grads, *gamma) {
                    for r in 0..rows {
                        for c in 0..n {
                            gg[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *beta) {
                    for r in 0..rows {
                        for c in 0..n {
                            gb[c] += g[r * n + c];
                        }
                    }
                }
                if wants(*x) {
                    let gx = slot(nodes, grads, *x).expect("checked");
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..n {
                            let dxh = g[r * n + c] * gm[c];
                            mean_d += dxh;
                            mean_dx += dxh * xhat[r * n + c];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for c in 0..n {
                            let dxh = g[r * n + c] * gm[c];
                            gx[r * n + c] += rstd[r] * (dxh - mean_d - xhat[r * n + c] * mean_dx);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if let Some(gt) = slot(nodes, grads, *table) {
                    let d = nodes[*table].value.cols();
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            gt[id * d + c] += g[r * d + c];
                        }
                    }
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            } => self.attention_backward(g, grads, (*q, *k, *v), *heads, *seq_len, probs),
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                if let Some(gl) = slot(nodes, grads, *logits) {
                    let vocab = nodes[*logits].value.cols();
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let s = g[0] * w;
                        for c in 0..vocab {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            gl[r * vocab + c] += s * (probs[r * vocab + c] - onehot);
                        }
                    }
                }
            }
        }
    }

    fn attention_backward(
        &self,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        (q, k, v): (usize, usize, usize),
        heads: usize,
        seq_len: usize,
        probs: &[f64],
    ) {
        let nodes = &self.nodes;
        let (qd, kd, vd) = (
            nodes[q].value.data(),
            nodes[k].value.data(),
            nodes[v].value.data(),
        );
        let d = nodes[q].value.cols();
        let rows = nodes[q].value.rows();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let batch = rows / seq_len;

        let mut gq = vec![0.0; rows * d];
        let mut gk = vec![0.0; rows * d];
        let mut gv = vec![0.0; rows * d];
        let mut dp = vec![0.0; seq_len];
        for b in 0..batch {
            let base = b * seq_len;
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq_len {
                    let prow = &probs[((b * heads + h) * seq_len + i) * seq_len..][..seq_len];
                    let gi = &g[(base + i) * d + off..(base + i) * d + off + dh];
                    let mut dot = 0.0;
                    for j in 0..=i {
                        let vj = &vd[(base + j) * d + off..(base + j) * d + off + dh];
                        dp[j] = gi.iter().zip(vj).map(|(x, y)| x * y).sum();
                        dot += prow[j] * dp[j];
                        let gvj = &mut gv[(base + j) * d + off..(base + j) * d + off + dh];
                        for (o, gg) in gvj.iter_mut().zip(gi) {
                            *o += prow[j] * gg;
                        }
                    }
                    let qi = &qd[(base + i) * d + off..(base + i) * d + off + dh];
                    for j in 0..=i {
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &kd[(base + j) * d + off..(base + j) * d + off + dh];
                        let gqi = &mut gq[(base + i) * d + off..(base + i) * d + off + dh];
                        for (o, kk) in gqi.iter_mut().zip(kj) {
                            *o += ds * kk;
                        }
                        let gkj = &mut gk[(base + j) * d + off..(base + j) * d + off + dh];
                        for (o, qq) in gkj.iter_mut().zip(qi) {
                            *o += ds * qq;
                        }
                    }
                }
            }
        }
        for (id, local) in [(q, gq), (k, gk), (v, gv)] {
            if nodes[id].requires_grad {
                let len = nodes[id].value.len();
                let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
                slot.iter_mut().zip(local).for_each(|(d, s)| *d += s);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(entries: &[(&str, Tensor)]) -> ParamStore {
        let mut ps = ParamStore::new();
        for (n, t) in entries {
            ps.insert(*n, t.clone()).unwrap();
        }
        ps
    }

    #[test]
    fn square_sum_gradient() {
        let ps = store(&[("x", Tensor::scalar(3.0))]);
        let mut g = Graph::new(&ps);
        let x = g.param("x").unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads["x"].data(), &[6.0]);
    }

    #[test]
    fn unused_param_gets_zero() {
        let ps = store(&[("x", Tensor::scalar(3.0)), ("p", Tensor::scalar(-1.0))]);
        let mut g = Graph::new(&ps);
        let x = g.param("x").unwrap();
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads["p"].data(), &[0.0]);
    }

    #[test]
    fn frozen_params_are_skipped() {
        let mut ps = store(&[("x", Tensor::scalar(3.0))]);
        ps.set_frozen("x", true).unwrap();
        let mut g = Graph::new(&ps);
        let x = g.param("x").unwrap();
        let loss = g.sum(x);
        assert!(g.backward(loss).unwrap().is_empty());
    }

    #[test]
    fn non_scalar_loss_is_contract_violation() {
        let ps = store(&[("x", Tensor::vector(vec![1.0, 2.0]).unwrap())]);
        let mut g = Graph::new(&ps);
        let x = g.param("x").unwrap();
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn nan_is_reported_with_op_name() {
        let ps = store(&[("x", Tensor::scalar(1e300))]);
        let mut g = Graph::new(&ps);
        let x = g.param("x").unwrap();
        let big = g.mul(x, x).unwrap(); // overflows to inf
        let loss = g.sum(big);
        match g.backward(loss) {
            Err(Error::Numeric { op }) => assert_eq!(op, "mul"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn cross_entropy_rejects_all_padding() {
        let ps = ParamStore::new();
        let mut g = Graph::new(&ps);
        let l = g.input(Tensor::zeros(&[2, 3]));
        assert!(g.cross_entropy(l, &[0, 1], &[false, false]).is_err());
    }

    #[test]
    fn attention_first_row_copies_value() {
        // Position 0 can only attend to itself.
        let ps = ParamStore::new();
        let mut g = Graph::new(&ps);
        let q = g.input(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let v = g.input(Tensor::matrix(2, 2, vec![5.0, 7.0, -1.0, 2.0]).unwrap());
        let o = g.causal_attention(q, q, v, 1, 2).unwrap();
        assert_eq!(&g.value(o).data()[..2], &[5.0, 7.0]);
    }
}
