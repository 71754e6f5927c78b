use std::borrow::Cow;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Gelu(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(usize),
    Mean(usize),
    GatherRows(usize, Vec<usize>),
    ScatterRows(usize, Vec<usize>),
    Pick(usize, Vec<(usize, usize)>),
    CausalAttention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    ClippedSurrogate {
        ratio: usize,
        advantages: Vec<f64>,
        eps: f64,
    },
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, [f64]>,
    shape: Vec<usize>,
    op: Op,
    param: Option<usize>,
    needs_grad: bool,
}

impl Node<'_> {
    fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    fn rows(&self) -> usize {
        self.value.len() / self.cols()
    }
}

/// Per-parameter gradients produced by one backward traversal, keyed by the
/// slot passed to [`Graph::param`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, slot: usize) -> Option<&[f64]> {
        self.slots.get(slot).and_then(|g| g.as_deref())
    }

    fn add_slot(&mut self, slot: usize, g: &[f64]) {
        if self.slots.len() <= slot {
            self.slots.resize(slot + 1, None);
        }
        match &mut self.slots[slot] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            none => *none = Some(g.to_vec()),
        }
    }

    /// Sums `other` into `self` slot by slot.
    pub fn merge(&mut self, other: &Gradients) {
        for (slot, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.add_slot(slot, g);
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.iter().all(Option::is_none)
    }

    /// Adds each slot's gradient into the gradient slot of `params[slot]`.
    pub fn accumulate_into(&self, params: &mut [Tensor]) {
        for (slot, g) in self.slots.iter().enumerate() {
            if let Some(g) = g {
                params[slot].accumulate_grad(g);
            }
        }
    }
}

/// Define-by-run computation graph.
///
/// Nodes are appended in evaluation order, so node index order is a
/// topological order and backward simply walks it in reverse.
#[derive(Debug, Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
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

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    row.iter_mut().for_each(|x| *x -= lse);
}

/// `out[m x n] += a[m x k] * b[k x n]`.
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
}

fn add_into(acc: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    acc.get_or_insert_with(|| vec![0.0; len])
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, [f64]>, shape: Vec<usize>, op: Op, inputs: &[usize]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value,
            shape,
            op,
            param: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a trainable tensor. Its gradient is reported under `slot`.
    pub fn param(&mut self, slot: usize, tensor: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(tensor.data()),
            shape: tensor.shape().to_vec(),
            op: Op::Leaf,
            param: Some(slot),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a tensor as a constant (no gradient flows into it).
    pub fn frozen(&mut self, tensor: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(tensor.data()),
            shape: tensor.shape().to_vec(),
            op: Op::Leaf,
            param: None,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        let shape = t.shape().to_vec();
        Ok(self.push(Cow::Owned(t.data().to_vec()), shape, Op::Leaf, &[]))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows(), n.cols())
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(
            Cow::Owned(out),
            vec![m, n],
            Op::MatMul(a.0, b.0),
            &[a.0, b.0],
        ))
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err(name, a, b));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Cow::Owned(out), shape, op, &[a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// Adds a length-`n` row vector to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(row).len() != n {
            return Err(self.shape_err("add_row", a, row));
        }
        let r = self.value(row);
        let mut out = self.value(a).to_vec();
        for i in 0..m {
            out[i * n..(i + 1) * n]
                .iter_mut()
                .zip(r)
                .for_each(|(o, b)| *o += b);
        }
        Ok(self.push(
            Cow::Owned(out),
            vec![m, n],
            Op::AddRow(a.0, row.0),
            &[a.0, row.0],
        ))
    }

    /// Scales row `i` of an `m x n` matrix by `col[i]` (`col` has `m` entries).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(col).len() != m {
            return Err(self.shape_err("mul_col", a, col));
        }
        let c = self.value(col);
        let mut out = self.value(a).to_vec();
        for i in 0..m {
            out[i * n..(i + 1) * n].iter_mut().for_each(|o| *o *= c[i]);
        }
        Ok(self.push(
            Cow::Owned(out),
            vec![m, n],
            Op::MulCol(a.0, col.0),
            &[a.0, col.0],
        ))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(Cow::Owned(out), shape, Op::Scale(a.0, c), &[a.0])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        self.push(Cow::Owned(out), shape, Op::AddScalar(a.0), &[a.0])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x.exp()).collect();
        let shape = self.shape(a).to_vec();
        self.push(Cow::Owned(out), shape, Op::Exp(a.0), &[a.0])
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu_parts(x).0).collect();
        let shape = self.shape(a).to_vec();
        self.push(Cow::Owned(out), shape, Op::Gelu(a.0), &[a.0])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (_, n) = self.dims(a);
        let mut out = self.value(a).to_vec();
        out.chunks_mut(n).for_each(softmax_in_place);
        let shape = self.shape(a).to_vec();
        self.push(Cow::Owned(out), shape, Op::Softmax(a.0), &[a.0])
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (_, n) = self.dims(a);
        let mut out = self.value(a).to_vec();
        out.chunks_mut(n).for_each(log_softmax_in_place);
        let shape = self.shape(a).to_vec();
        self.push(Cow::Owned(out), shape, Op::LogSoftmax(a.0), &[a.0])
    }

    /// Row-wise layer normalization with affine gain and bias.
    ///
    /// A row whose entries are all equal normalizes to exact zeros.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(gain).len() != n {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        if self.value(bias).len() != n {
            return Err(self.shape_err("layer_norm", x, bias));
        }
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            let constant = row.iter().all(|&v| v == row[0]);
            for j in 0..n {
                let h = if constant { 0.0 } else { (row[j] - mean) * r };
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm {
            x: x.0,
            gain: gain.0,
            bias: bias.0,
            xhat,
            rstd,
        };
        Ok(self.push(Cow::Owned(out), vec![m, n], op, &[x.0, gain.0, bias.0]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(Cow::Owned(vec![s]), vec![1], Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(Cow::Owned(vec![s]), vec![1], Op::Mean(a.0), &[a.0])
    }

    /// Selects rows `idx` of an `m x n` matrix (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Contract(format!(
                "gather_rows index {bad} out of range for {m} rows"
            )));
        }
        if idx.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&v[i * n..(i + 1) * n]);
        }
        Ok(self.push(
            Cow::Owned(out),
            vec![idx.len(), n],
            Op::GatherRows(a.0, idx.to_vec()),
            &[a.0],
        ))
    }

    /// Embedding lookup: rows of `table` for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, _) = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Vocabulary { id: bad, size: v });
        }
        self.gather_rows(table, ids)
    }

    /// Scatter-adds row `r` of `a` into row `idx[r]` of a zero `rows x n` matrix.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if idx.len() != m || idx.iter().any(|&i| i >= rows) {
            return Err(Error::Contract(format!(
                "scatter_rows: {} indices for {m} rows into {rows}",
                idx.len()
            )));
        }
        let v = self.value(a);
        let mut out = vec![0.0; rows * n];
        for (r, &dst) in idx.iter().enumerate() {
            out[dst * n..(dst + 1) * n]
                .iter_mut()
                .zip(&v[r * n..(r + 1) * n])
                .for_each(|(o, x)| *o += x);
        }
        Ok(self.push(
            Cow::Owned(out),
            vec![rows, n],
            Op::ScatterRows(a.0, idx.to_vec()),
            &[a.0],
        ))
    }

    /// Picks entries `(row, col)` of a matrix into a column vector.
    pub fn pick(&mut self, a: Var, at: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = self.dims(a);
        if at.is_empty() {
            return Err(Error::Contract("pick with no entries".into()));
        }
        if let Some(&(r, c)) = at.iter().find(|&&(r, c)| r >= m || c >= n) {
            return Err(Error::Contract(format!(
                "pick ({r}, {c}) out of range for {m}x{n}"
            )));
        }
        let v = self.value(a);
        let out = at.iter().map(|&(r, c)| v[r * n + c]).collect();
        Ok(self.push(
            Cow::Owned(out),
            vec![at.len(), 1],
            Op::Pick(a.0, at.to_vec()),
            &[a.0],
        ))
    }

    /// Cross-entropy summed over rows: `sum_r -log_softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, _) = self.dims(logits);
        if targets.len() != m {
            return Err(Error::Contract(format!(
                "cross_entropy: {} targets for {m} rows",
                targets.len()
            )));
        }
        let lp = self.log_softmax(logits);
        let at: Vec<_> = targets.iter().copied().enumerate().collect();
        let picked = self.pick(lp, &at)?;
        let s = self.sum(picked);
        Ok(self.scale(s, -1.0))
    }

    /// Multi-head scaled dot-product attention with a causal mask.
    ///
    /// `q`, `k`, `v` are `T x d`; heads split the columns evenly. Row `t` of
    /// the output only reads rows `0..=t`, and the arithmetic for a row does
    /// not depend on how many later rows exist.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (t, d) = self.dims(q);
        if self.dims(k) != (t, d) {
            return Err(self.shape_err("causal_attention", q, k));
        }
        if self.dims(v) != (t, d) {
            return Err(self.shape_err("causal_attention", q, v));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "{heads} heads do not divide model width {d}"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; heads * t * t];
        let mut out = vec![0.0; t * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let qi = &qv[i * d + off..i * d + off + dh];
                let p = &mut probs[(h * t + i) * t..(h * t + i) * t + i + 1];
                for (j, pj) in p.iter_mut().enumerate() {
                    let kj = &kv[j * d + off..j * d + off + dh];
                    *pj = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_in_place(p);
                let oi = &mut out[i * d + off..i * d + off + dh];
                for (j, &pj) in p.iter().enumerate() {
                    let vj = &vv[j * d + off..j * d + off + dh];
                    oi.iter_mut().zip(vj).for_each(|(o, x)| *o += pj * x);
                }
            }
        }
        let op = Op::CausalAttention {
            q: q.0,
            k: k.0,
            v: v.0,
            heads,
            probs,
        };
        Ok(self.push(Cow::Owned(out), vec![t, d], op, &[q.0, k.0, v.0]))
    }

    /// Elementwise `min(r * A, clip(r, 1 - eps, 1 + eps) * A)`.
    pub fn clipped_surrogate(&mut self, ratio: Var, advantages: &[f64], eps: f64) -> Result<Var> {
        let r = self.value(ratio);
        if r.len() != advantages.len() {
            return Err(Error::Contract(format!(
                "clipped_surrogate: {} ratios vs {} advantages",
                r.len(),
                advantages.len()
            )));
        }
        let out = r
            .iter()
            .zip(advantages)
            .map(|(&s, &a)| (s * a).min(s.clamp(1.0 - eps, 1.0 + eps) * a))
            .collect();
        let shape = self.shape(ratio).to_vec();
        let op = Op::ClippedSurrogate {
            ratio: ratio.0,
            advantages: advantages.to_vec(),
            eps,
        };
        Ok(self.push(Cow::Owned(out), shape, op, &[ratio.0]))
    }

    /// Reverse traversal from a scalar `loss`, returning parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_scaled(loss, 1.0)
    }

    /// Like [`Graph::backward`] with the seed adjoint set to `seed`.
    pub fn backward_scaled(&self, loss: Var, seed: f64) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![seed]);
        let mut grads = Gradients::default();
        for id in (0..=loss.0).rev() {
            let Some(dy) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Some(slot) = node.param {
                grads.add_slot(slot, &dy);
                continue;
            }
            self.backward_node(node, &dy, &mut adj);
        }
        Ok(grads)
    }

    fn wants(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    fn backward_node(&self, node: &Node<'_>, dy: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a].rows(), self.nodes[a].cols());
                let n = self.nodes[b].cols();
                let av = &self.nodes[a].value;
                let bv = &self.nodes[b].value;
                if self.wants(a) {
                    let da = add_into(&mut adj[a], m * k);
                    for i in 0..m {
                        let dyi = &dy[i * n..(i + 1) * n];
                        for p in 0..k {
                            let bp = &bv[p * n..(p + 1) * n];
                            da[i * k + p] += dyi.iter().zip(bp).map(|(x, z)| x * z).sum::<f64>();
                        }
                    }
                }
                if self.wants(b) {
                    let db = add_into(&mut adj[b], k * n);
                    for i in 0..m {
                        let dyi = &dy[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            db[p * n..(p + 1) * n]
                                .iter_mut()
                                .zip(dyi)
                                .for_each(|(d, g)| *d += a_ip * g);
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for x in [a, b] {
                    if self.wants(x) {
                        let d = add_into(&mut adj[x], dy.len());
                        d.iter_mut().zip(dy).for_each(|(d, g)| *d += g);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if self.wants(a) {
                    let d = add_into(&mut adj[a], dy.len());
                    d.iter_mut().zip(dy).for_each(|(d, g)| *d += g);
                }
                if self.wants(b) {
                    let d = add_into(&mut adj[b], dy.len());
                    d.iter_mut().zip(dy).for_each(|(d, g)| *d -= g);
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
                if self.wants(a) {
                    let d = add_into(&mut adj[a], dy.len());
                    for i in 0..dy.len() {
                        d[i] += dy[i] * bv[i];
                    }
                }
                if self.wants(b) {
                    let d = add_into(&mut adj[b], dy.len());
                    for i in 0..dy.len() {
                        d[i] += dy[i] * av[i];
                    }
                }
            }
            &Op::AddRow(a, row) => {
                let n = node.cols();
                if self.wants(a) {
                    let d = add_into(&mut adj[a], dy.len());
                    d.iter_mut().zip(dy).for_each(|(d, g)| *d += g);
                }
                if self.wants(row) {
                    let d = add_into(&mut adj[row], n);
                    for chunk in dy.chunks(n) {
                        d.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
                    }
                }
            }
            &Op::MulCol(a, col) => {
                let n = node.cols();
                let (av, cv) = (&self.nodes[a].value, &self.nodes[col].value);
                if self.wants(a) {
                    let d = add_into(&mut adj[a], dy.len());
                    for (i, (dr, gr)) in d.chunks_mut(n).zip(dy.chunks(n)).enumerate() {
                        dr.iter_mut().zip(gr).for_each(|(d, g)| *d += g * cv[i]);
                    }
                }
                if self.wants(col) {
                    let d = add_into(&mut adj[col], cv.len());
                    for (i, (ar, gr)) in av.chunks(n).zip(dy.chunks(n)).enumerate() {
                        d[i] += ar.iter().zip(gr).map(|(x, g)| x * g).sum::<f64>();
                    }
                }
            }
            &Op::Scale(a, c) => {
                let d = add_into(&mut adj[a], dy.len());
                d.iter_mut().zip(dy).for_each(|(d, g)| *d += c * g);
            }
            &Op::AddScalar(a) => {
                let d = add_into(&mut adj[a], dy.len());
                d.iter_mut().zip(dy).for_each(|(d, g)| *d += g);
            }
            &Op::Exp(a) => {
                let d = add_into(&mut adj[a], dy.len());
                for i in 0..dy.len() {
                    d[i] += dy[i] * y[i];
                }
            }
            &Op::Gelu(a) => {
                let xv = &self.nodes[a].value;
                let d = add_into(&mut adj[a], dy.len());
                for i in 0..dy.len() {
                    d[i] += dy[i] * gelu_parts(xv[i]).1;
                }
            }
            &Op::Softmax(a) => {
                let n = node.cols();
                let d = add_into(&mut adj[a], dy.len());
                for ((dr, gr), yr) in d.chunks_mut(n).zip(dy.chunks(n)).zip(y.chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, p)| g * p).sum();
                    for j in 0..n {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            &Op::LogSoftmax(a) => {
                let n = node.cols();
                let d = add_into(&mut adj[a], dy.len());
                for ((dr, gr), yr) in d.chunks_mut(n).zip(dy.chunks(n)).zip(y.chunks(n)) {
                    let total: f64 = gr.iter().sum();
                    for j in 0..n {
                        dr[j] += gr[j] - yr[j].exp() * total;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = node.cols();
                let m = node.rows();
                let g = &self.nodes[*gain].value;
                if self.wants(*gain) {
                    let d = add_into(&mut adj[*gain], n);
                    for i in 0..m {
                        for j in 0..n {
                            d[j] += dy[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                if self.wants(*bias) {
                    let d = add_into(&mut adj[*bias], n);
                    for chunk in dy.chunks(n) {
                        d.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
                    }
                }
                if self.wants(*x) {
                    let d = add_into(&mut adj[*x], m * n);
                    let mut dxhat = vec![0.0; n];
                    for i in 0..m {
                        let h = &xhat[i * n..(i + 1) * n];
                        for j in 0..n {
                            dxhat[j] = dy[i * n + j] * g[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dh =
                            dxhat.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            d[i * n + j] += rstd[i] * (dxhat[j] - mean_d - h[j] * mean_dh);
                        }
                    }
                }
            }
            &Op::Sum(a) => {
                let len = self.nodes[a].value.len();
                let d = add_into(&mut adj[a], len);
                d.iter_mut().for_each(|d| *d += dy[0]);
            }
            &Op::Mean(a) => {
                let len = self.nodes[a].value.len();
                let d = add_into(&mut adj[a], len);
                let g = dy[0] / len as f64;
                d.iter_mut().for_each(|d| *d += g);
            }
            Op::GatherRows(a, idx) => {
                let n = node.cols();
                let len = self.nodes[*a].value.len();
                let d = add_into(&mut adj[*a], len);
                for (r, &src) in idx.iter().enumerate() {
                    d[src * n..(src + 1) * n]
                        .iter_mut()
                        .zip(&dy[r * n..(r + 1) * n])
                        .for_each(|(d, g)| *d += g);
                }
            }
            Op::ScatterRows(a, idx) => {
                let n = node.cols();
                let len = self.nodes[*a].value.len();
                let d = add_into(&mut adj[*a], len);
                for (r, &dst) in idx.iter().enumerate() {
                    d[r * n..(r + 1) * n]
                        .iter_mut()
                        .zip(&dy[dst * n..(dst + 1) * n])
                        .for_each(|(d, g)| *d += g);
                }
            }
            Op::Pick(a, at) => {
                let n = self.nodes[*a].cols();
                let len = self.nodes[*a].value.len();
                let d = add_into(&mut adj[*a], len);
                for (i, &(r, c)) in at.iter().enumerate() {
                    d[r * n + c] += dy[i];
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (t, d) = (node.rows(), node.cols());
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (
                    &self.nodes[*q].value,
                    &self.nodes[*k].value,
                    &self.nodes[*v].value,
                );
                let mut dq = vec![0.0; t * d];
                let mut dk = vec![0.0; t * d];
                let mut dv = vec![0.0; t * d];
                let mut ds = vec![0.0; t];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..t {
                        let p = &probs[(h * t + i) * t..(h * t + i) * t + i + 1];
                        let gi = &dy[i * d + off..i * d + off + dh];
                        let mut dot = 0.0;
                        for (j, &pj) in p.iter().enumerate() {
                            let vj = &vv[j * d + off..j * d + off + dh];
                            let dp = gi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>();
                            ds[j] = dp;
                            dot += pj * dp;
                            dv[j * d + off..j * d + off + dh]
                                .iter_mut()
                                .zip(gi)
                                .for_each(|(o, g)| *o += pj * g);
                        }
                        for (j, &pj) in p.iter().enumerate() {
                            let s = pj * (ds[j] - dot) * scale;
                            if s == 0.0 {
                                continue;
                            }
                            for c in 0..dh {
                                dq[i * d + off + c] += s * kv[j * d + off + c];
                                dk[j * d + off + c] += s * qv[i * d + off + c];
                            }
                        }
                    }
                }
                for (id, g) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.wants(id) {
                        let acc = add_into(&mut adj[id], t * d);
                        acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::ClippedSurrogate {
                ratio,
                advantages,
                eps,
            } => {
                let r = &self.nodes[*ratio].value;
                let d = add_into(&mut adj[*ratio], r.len());
                for i in 0..r.len() {
                    let a = advantages[i];
                    let unclipped = r[i] * a;
                    let clipped = r[i].clamp(1.0 - eps, 1.0 + eps) * a;
                    // Ties resolve to the unclipped branch, which is the only
                    // one carrying a derivative inside the trust region.
                    if unclipped <= clipped {
                        d[i] += dy[i] * a;
                    }
                }
            }
        }
    }
}
