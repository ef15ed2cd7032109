//! Tape-based reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Every operation appends a node to a [`Tape`]; parents always precede their
//! children, so [`Tape::backward`] is a single reverse sweep. Leaves keep their
//! gradients across sweeps (accumulation), intermediate nodes are reset at the
//! start of each sweep. Call [`Tape::zero_grads`] to clear everything.
//!
//! The op set is exactly what a small pre-layernorm transformer needs: matmul,
//! bias/residual adds, layernorm, GELU, embedding lookup, a fused causal
//! multi-head attention (with per-head output masking) and masked
//! cross-entropy. Arrays are row-major; 2-D ops treat the last axis as columns.

use crate::error::{CastError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Dense value buffer plus same-shape gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffArray {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
}

impl DiffArray {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        Self::check(&shape, values.len())?;
        Ok(Self {
            grad: vec![0.0; values.len()],
            shape,
            values,
        })
    }

    fn check(shape: &[usize], len: usize) -> Result<()> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(CastError::input(format!(
                "shape {shape:?} must be nonempty with positive dimensions"
            )));
        }
        if shape.iter().product::<usize>() != len {
            return Err(CastError::Dimension {
                op: "DiffArray::new",
                lhs: shape.to_vec(),
                rhs: vec![len],
            });
        }
        Ok(())
    }

    /// Like [`DiffArray::new`] but without a gradient buffer; tape outputs
    /// get theirs lazily.
    pub(crate) fn computed(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        Self::check(&shape, values.len())?;
        Ok(Self {
            shape,
            grad: Vec::new(),
            values,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            values: vec![value],
            grad: vec![0.0],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.shape.last().expect("nonempty shape");
        (self.values.len() / cols, cols)
    }
}

/// How a loss over several rows is reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

/// Static description of a fused causal attention call.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSpec {
    pub batch: usize,
    pub seq: usize,
    pub n_heads: usize,
    /// `masked[h]` zeroes head `h`'s attention output.
    pub masked: Vec<bool>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    /// Saved `tanh` of the inner polynomial, reused by the backward.
    Gelu(Var, Vec<f64>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    EmbedLookup {
        table: Var,
        ids: Vec<usize>,
    },
    AddColumns {
        base: Var,
        delta: Var,
        offset: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        scale: f64,
    },
}

#[derive(Debug)]
struct Node {
    /// Value and shape; its own gradient buffer is unused on the tape.
    array: DiffArray,
    op: Op,
    requires_grad: bool,
    /// Empty until something flows into it; empty means all zeros.
    grad: Vec<f64>,
}

/// Ordered record of operations; node ids are positions in the record.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Shared zero buffer backing gradients that were never materialized.
    zeros: Vec<f64>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

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

    fn push(&mut self, mut array: DiffArray, op: Op, requires_grad: bool) -> Var {
        array.grad = Vec::new();
        if self.zeros.len() < array.len() {
            self.zeros.resize(array.len(), 0.0);
        }
        self.nodes.push(Node {
            array,
            op,
            requires_grad,
            grad: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, array: DiffArray) -> Var {
        self.push(array, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, array: DiffArray) -> Var {
        self.push(array, Op::Leaf, false)
    }

    pub fn leaf(&mut self, array: DiffArray, requires_grad: bool) -> Var {
        self.push(array, Op::Leaf, requires_grad)
    }

    fn array(&self, v: Var) -> &DiffArray {
        &self.nodes[v.0].array
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].array.values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].array.shape
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        let n = &self.nodes[v.0];
        if n.grad.is_empty() {
            &self.zeros[..n.array.len()]
        } else {
            &n.grad
        }
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = Vec::new();
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CastError::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = gemm_new(m, k, n, self.value(a), (k, 1), self.value(b), (n, 1));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(DiffArray::computed(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(CastError::Dimension {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(DiffArray::computed(shape, out)?, Op::Add(a, b), rg))
    }

    /// `x[.., n] + bias[n]`, broadcasting over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.array(x).rows_cols();
        if self.array(bias).len() != cols {
            return Err(CastError::Dimension {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias);
        let out: Vec<f64> = self
            .value(x)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(DiffArray::computed(shape, out)?, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        let arr = DiffArray::computed(shape, out).expect("shape preserved");
        self.push(arr, Op::Scale(x, c), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(DiffArray::scalar(s), Op::Sum(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.array(x).len() {
            return Err(CastError::Dimension {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let vals = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(DiffArray::computed(shape, vals)?, Op::Reshape(x), rg))
    }

    /// Row-wise softmax over the last axis, max-shifted.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (_, cols) = self.array(x).rows_cols();
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        let arr = DiffArray::computed(shape, out).expect("shape preserved");
        self.push(arr, Op::SoftmaxRows(x), rg)
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let tanh: Vec<f64> = xv.iter().map(|&v| gelu_tanh(v)).collect();
        let out = xv.iter().zip(&tanh).map(|(&v, &t)| 0.5 * v * (1.0 + t)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        let arr = DiffArray::computed(shape, out).expect("shape preserved");
        self.push(arr, Op::Gelu(x, tanh), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.array(x).rows_cols();
        if self.array(gain).len() != cols || self.array(bias).len() != cols {
            return Err(CastError::Dimension {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        {
            let xv = self.value(x);
            let g = self.value(gain);
            let b = self.value(bias);
            for r in 0..rows {
                let row = &xv[r * cols..(r + 1) * cols];
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                rstd[r] = rs;
                for c in 0..cols {
                    let xh = (row[c] - mean) * rs;
                    xhat[r * cols + c] = xh;
                    out[r * cols + c] = xh * g[c] + b[c];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            DiffArray::computed(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Gathers rows `ids` of a `[vocab, d]` table into `[ids.len(), d]`.
    pub fn embed_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(CastError::input(format!(
                "embedding table must be 2-D, got {shape:?}"
            )));
        }
        let (vocab, d) = (shape[0], shape[1]);
        if ids.is_empty() {
            return Err(CastError::input("embedding lookup with no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(CastError::input(format!(
                "token id {bad} out of range for table of {vocab} rows"
            )));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            DiffArray::computed(vec![ids.len(), d], out)?,
            Op::EmbedLookup {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// `base` with `delta` added into columns `[offset, offset + delta_cols)`.
    pub fn add_columns(&mut self, base: Var, delta: Var, offset: usize) -> Result<Var> {
        let (sb, sd) = (self.shape(base).to_vec(), self.shape(delta).to_vec());
        if sb.len() != 2 || sd.len() != 2 || sb[0] != sd[0] || offset + sd[1] > sb[1] {
            return Err(CastError::Dimension {
                op: "add_columns",
                lhs: sb,
                rhs: sd,
            });
        }
        let (rows, cols, w) = (sb[0], sb[1], sd[1]);
        let mut out = self.value(base).to_vec();
        let dv = self.value(delta);
        for r in 0..rows {
            for c in 0..w {
                out[r * cols + offset + c] += dv[r * w + c];
            }
        }
        let rg = self.rg(base) || self.rg(delta);
        Ok(self.push(
            DiffArray::computed(sb, out)?,
            Op::AddColumns {
                base,
                delta,
                offset,
            },
            rg,
        ))
    }

    /// Fused causal multi-head attention.
    ///
    /// `q`, `k`, `v` are `[batch * seq, d_model]`; head `h` owns columns
    /// `[h * d_head, (h + 1) * d_head)`. The output has the same layout, with
    /// masked heads' columns exactly zero.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        if sq.len() != 2 || self.shape(k) != sq.as_slice() || self.shape(v) != sq.as_slice() {
            return Err(CastError::Dimension {
                op: "causal_attention",
                lhs: sq,
                rhs: self.shape(k).to_vec(),
            });
        }
        let (rows, d) = (sq[0], sq[1]);
        let AttentionSpec {
            batch,
            seq,
            n_heads,
            ..
        } = spec;
        if rows != batch * seq || n_heads == 0 || d % n_heads != 0 || spec.masked.len() != n_heads
        {
            return Err(CastError::input(format!(
                "attention spec {spec:?} incompatible with inputs {sq:?}"
            )));
        }
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; batch * n_heads * seq * seq];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..n_heads {
                if spec.masked[h] {
                    continue;
                }
                let col = h * dh;
                let pbase = (b * n_heads + h) * seq * seq;
                for t in 0..seq {
                    let qrow = &qv[(b * seq + t) * d + col..][..dh];
                    for s in 0..=t {
                        let krow = &kv[(b * seq + s) * d + col..][..dh];
                        scores[s] = dot(qrow, krow) * scale;
                    }
                    softmax_in_place(&mut scores[..=t]);
                    probs[pbase + t * seq..][..=t].copy_from_slice(&scores[..=t]);
                    let orow = &mut out[(b * seq + t) * d + col..][..dh];
                    for s in 0..=t {
                        let p = scores[s];
                        let vrow = &vv[(b * seq + s) * d + col..][..dh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            DiffArray::computed(sq, out)?,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
            rg,
        ))
    }

    /// Cross-entropy between rows of `logits` (last axis = vocabulary) and
    /// `targets`, restricted to rows where `mask` is set. An all-false mask
    /// yields loss 0 with zero gradient.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
        reduction: Reduction,
    ) -> Result<Var> {
        let (rows, vocab) = self.array(logits).rows_cols();
        if targets.len() != rows || mask.len() != rows {
            return Err(CastError::Dimension {
                op: "cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len(), mask.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(CastError::input(format!(
                "target id {bad} out of range for vocabulary of {vocab}"
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        let scale = match (reduction, count) {
            (_, 0) => 0.0,
            (Reduction::Mean, c) => 1.0 / c as f64,
            (Reduction::Sum, _) => 1.0,
        };
        let lv = self.value(logits);
        let mut probs = vec![0.0; rows * vocab];
        let mut total = 0.0;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            p.copy_from_slice(&lv[r * vocab..(r + 1) * vocab]);
            let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + p.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - p[targets[r]];
            softmax_in_place(p);
        }
        let loss = total * scale;
        if !loss.is_finite() {
            return Err(CastError::Numeric(format!("cross-entropy is {loss}")));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            DiffArray::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                scale,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls; intermediate gradients are recomputed from scratch.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.array(loss).len() != 1 {
            return Err(CastError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.grad = Vec::new();
            }
        }
        if !self.rg(loss) {
            return Ok(());
        }
        accumulate(&mut self.nodes, loss, &[1.0]);
        for i in (0..=loss.0).rev() {
            let n = &self.nodes[i];
            if !n.requires_grad || n.grad.is_empty() || matches!(n.op, Op::Leaf) {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            backprop_node(node, before);
        }
        Ok(())
    }
}

/// The parent's gradient buffer, materialized, if it tracks gradients.
fn parent_grad<'a>(nodes: &'a mut [Node], v: Var) -> Option<&'a mut Vec<f64>> {
    let n = &mut nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    if n.grad.is_empty() {
        n.grad = vec![0.0; n.array.len()];
    }
    Some(&mut n.grad)
}

/// Like [`accumulate`], but adopts `contrib` as the buffer when possible.
fn accumulate_owned(nodes: &mut [Node], v: Var, contrib: Vec<f64>) {
    let n = &mut nodes[v.0];
    if n.requires_grad && n.grad.is_empty() {
        n.grad = contrib;
    } else {
        accumulate(nodes, v, &contrib);
    }
}

fn accumulate(nodes: &mut [Node], v: Var, contrib: &[f64]) {
    let n = &mut nodes[v.0];
    if n.requires_grad && n.grad.is_empty() {
        n.grad = contrib.to_vec();
        return;
    }
    if let Some(g) = parent_grad(nodes, v) {
        for (a, b) in g.iter_mut().zip(contrib) {
            *a += b;
        }
    }
}

fn backprop_node(node: &Node, nodes: &mut [Node]) {
    let g = &node.grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].array.shape[0], nodes[a.0].array.shape[1]);
            let n = nodes[b.0].array.shape[1];
            if nodes[a.0].requires_grad {
                // dA = dC · Bᵀ
                let da = gemm_new(m, n, k, g, (n, 1), &nodes[b.0].array.values, (1, n));
                accumulate_owned(nodes, *a, da);
            }
            if nodes[b.0].requires_grad {
                // dB = Aᵀ · dC
                let db = gemm_new(k, m, n, &nodes[a.0].array.values, (1, k), g, (n, 1));
                accumulate_owned(nodes, *b, db);
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, *a, g);
            accumulate(nodes, *b, g);
        }
        Op::AddBias(x, bias) => {
            accumulate(nodes, *x, g);
            if let Some(bg) = parent_grad(nodes, *bias) {
                let cols = bg.len();
                for row in g.chunks(cols) {
                    for (a, b) in bg.iter_mut().zip(row) {
                        *a += b;
                    }
                }
            }
        }
        Op::Scale(x, c) => {
            let contrib: Vec<f64> = g.iter().map(|v| v * c).collect();
            accumulate(nodes, *x, &contrib);
        }
        Op::Sum(x) => {
            if let Some(xg) = parent_grad(nodes, *x) {
                xg.iter_mut().for_each(|v| *v += g[0]);
            }
        }
        Op::Reshape(x) => accumulate(nodes, *x, g),
        Op::SoftmaxRows(x) => {
            let y = &node.array.values;
            let (_, cols) = node.array.rows_cols();
            let mut dx = vec![0.0; y.len()];
            for ((dr, yr), gr) in dx.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                let s = dot(yr, gr);
                for c in 0..cols {
                    dr[c] = yr[c] * (gr[c] - s);
                }
            }
            accumulate(nodes, *x, &dx);
        }
        Op::Gelu(x, tanh) => {
            let xv = &nodes[x.0].array.values;
            let dx: Vec<f64> = xv
                .iter()
                .zip(tanh)
                .zip(g)
                .map(|((&v, &t), &gv)| gv * gelu_grad(v, t))
                .collect();
            accumulate(nodes, *x, &dx);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let cols = nodes[gain.0].array.len();
            let gv = nodes[gain.0].array.values.clone();
            if let Some(bg) = parent_grad(nodes, *bias) {
                for row in g.chunks(cols) {
                    for (a, b) in bg.iter_mut().zip(row) {
                        *a += b;
                    }
                }
            }
            if let Some(gg) = parent_grad(nodes, *gain) {
                for (row, xr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                    for c in 0..cols {
                        gg[c] += row[c] * xr[c];
                    }
                }
            }
            if nodes[x.0].requires_grad {
                let mut dx = vec![0.0; g.len()];
                let inv = 1.0 / cols as f64;
                for (r, rs) in rstd.iter().enumerate() {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let xr = &xhat[r * cols..(r + 1) * cols];
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for c in 0..cols {
                        let d = gr[c] * gv[c];
                        mean_d += d;
                        mean_dx += d * xr[c];
                    }
                    mean_d *= inv;
                    mean_dx *= inv;
                    for c in 0..cols {
                        let d = gr[c] * gv[c];
                        dx[r * cols + c] = rs * (d - mean_d - xr[c] * mean_dx);
                    }
                }
                accumulate(nodes, *x, &dx);
            }
        }
        Op::EmbedLookup { table, ids } => {
            if let Some(tg) = parent_grad(nodes, *table) {
                let d = g.len() / ids.len();
                for (row, &i) in g.chunks(d).zip(ids) {
                    for (a, b) in tg[i * d..(i + 1) * d].iter_mut().zip(row) {
                        *a += b;
                    }
                }
            }
        }
        Op::AddColumns {
            base,
            delta,
            offset,
        } => {
            accumulate(nodes, *base, g);
            let w = nodes[delta.0].array.shape[1];
            if let Some(dg) = parent_grad(nodes, *delta) {
                let cols = node.array.shape[1];
                for (r, drow) in dg.chunks_mut(w).enumerate() {
                    for (c, dv) in drow.iter_mut().enumerate() {
                        *dv += g[r * cols + offset + c];
                    }
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            spec,
            probs,
        } => {
            let d = node.array.shape[1];
            let (batch, seq, n_heads) = (spec.batch, spec.seq, spec.n_heads);
            let dh = d / n_heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let (qv, kv, vv) = (
                &nodes[q.0].array.values,
                &nodes[k.0].array.values,
                &nodes[v.0].array.values,
            );
            let mut dq = vec![0.0; g.len()];
            let mut dk = vec![0.0; g.len()];
            let mut dv = vec![0.0; g.len()];
            let mut dp = vec![0.0; seq];
            for b in 0..batch {
                for h in 0..n_heads {
                    if spec.masked[h] {
                        continue;
                    }
                    let col = h * dh;
                    let pbase = (b * n_heads + h) * seq * seq;
                    for t in 0..seq {
                        let grow = &g[(b * seq + t) * d + col..][..dh];
                        let prow = &probs[pbase + t * seq..][..=t];
                        for s in 0..=t {
                            let vrow = &vv[(b * seq + s) * d + col..][..dh];
                            dp[s] = dot(grow, vrow);
                            let p = prow[s];
                            for (x, gv) in dv[(b * seq + s) * d + col..][..dh].iter_mut().zip(grow) {
                                *x += p * gv;
                            }
                        }
                        let inner = dot(prow, &dp[..=t]);
                        let qrow = &qv[(b * seq + t) * d + col..][..dh];
                        for s in 0..=t {
                            let ds = prow[s] * (dp[s] - inner) * scale;
                            let krow = &kv[(b * seq + s) * d + col..][..dh];
                            for (x, kx) in dq[(b * seq + t) * d + col..][..dh].iter_mut().zip(krow) {
                                *x += ds * kx;
                            }
                            for (x, qx) in dk[(b * seq + s) * d + col..][..dh].iter_mut().zip(qrow) {
                                *x += ds * qx;
                            }
                        }
                    }
                }
            }
            accumulate(nodes, *q, &dq);
            accumulate(nodes, *k, &dk);
            accumulate(nodes, *v, &dv);
        }
        Op::CrossEntropy {
            logits,
            targets,
            mask,
            probs,
            scale,
        } => {
            if let Some(lg) = parent_grad(nodes, *logits) {
                let vocab = probs.len() / targets.len();
                let gs = g[0] * scale;
                for (r, &m) in mask.iter().enumerate() {
                    if !m {
                        continue;
                    }
                    let p = &probs[r * vocab..(r + 1) * vocab];
                    let row = &mut lg[r * vocab..(r + 1) * vocab];
                    for c in 0..vocab {
                        row[c] += gs * p[c];
                    }
                    row[targets[r]] -= gs;
                }
            }
        }
    }
}

/// `tanh` through a single `exp`; libm's version dominates GELU cost.
/// Absolute error stays at a few ulps of 1.
fn fast_tanh(x: f64) -> f64 {
    if x.abs() > 20.0 {
        return x.signum();
    }
    let e = (2.0 * x).exp();
    (e - 1.0) / (e + 1.0)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `a[m×k] · b[k×n]`, row-major.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    gemm_new(m, k, n, a, (k, 1), b, (n, 1))
}

/// Row-major `a · b` where the inputs are read through (row, column)
/// strides; each operand must be either row-major `(cols, 1)` or its
/// transpose `(1, rows)`.
fn gemm_new(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize)) -> Vec<f64> {
    let dense = |rows: usize, cols: usize, s: (usize, usize)| s == (cols, 1) || s == (1, rows);
    assert!(dense(m, k, sa) && dense(k, n, sb), "unsupported gemm strides");
    assert!(a.len() == m * k && b.len() == k * n);
    let mut c: Vec<f64> = Vec::with_capacity(m * n);
    if m == 0 || n == 0 {
        return c;
    }
    // SAFETY: both layouts keep every strided index of `a` below m*k and of
    // `b` below k*n. With beta = 0 dgemm never reads `c`, only writes all
    // m*n entries, after which the length can be set.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
        c.set_len(m * n);
    }
    c
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_tanh(x: f64) -> f64 {
    fast_tanh(GELU_C * (x + GELU_A * x * x * x))
}

/// Derivative of the tanh-approximated GELU given `t = gelu_tanh(x)`.
fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Central-difference gradient check.
///
/// Builds the loss once to obtain analytic gradients, then perturbs each
/// probed element `(param index, flat element index)` by `±step`. `None`
/// probes every element. Returns the maximum relative error, with the
/// denominator `max(|analytic|, |numeric|, 1e-12)`.
pub fn finite_difference_check<F>(
    params: &[DiffArray],
    probes: Option<&[(usize, usize)]>,
    step: f64,
    loss_fn: F,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(CastError::input(format!("finite-difference step must be > 0, got {step}")));
    }
    let eval = |ps: &[DiffArray]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let loss = loss_fn(&mut tape, &vars)?;
        let l = tape.value(loss)[0];
        if !l.is_finite() {
            return Err(CastError::Numeric(format!("loss is {l}")));
        }
        Ok((tape, vars, loss))
    };
    let (mut tape, vars, loss) = eval(params)?;
    tape.backward(loss)?;

    let all: Vec<(usize, usize)>;
    let probes = match probes {
        Some(p) => p,
        None => {
            all = params
                .iter()
                .enumerate()
                .flat_map(|(i, p)| (0..p.len()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };

    let mut work: Vec<DiffArray> = params.to_vec();
    let mut max_err = 0.0f64;
    for &(pi, ei) in probes {
        if pi >= params.len() || ei >= params[pi].len() {
            return Err(CastError::input(format!("probe ({pi}, {ei}) out of range")));
        }
        let analytic = tape.grad(vars[pi])[ei];
        let orig = params[pi].values[ei];
        work[pi].values[ei] = orig + step;
        let (t, _, l) = eval(&work)?;
        let plus = t.value(l)[0];
        work[pi].values[ei] = orig - step;
        let (t, _, l) = eval(&work)?;
        let minus = t.value(l)[0];
        work[pi].values[ei] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let denom = analytic.abs().max(numeric.abs()).max(1e-12);
        max_err = max_err.max((analytic - numeric).abs() / denom);
    }
    Ok(max_err)
}
