//! Reverse-mode autodiff on a Wengert tape.
//!
//! Ops execute eagerly: each builder method computes the forward value,
//! records an op node, and returns its [`NodeId`]. Insertion order is the
//! topological order, so [`Graph::backward`] is a single reverse sweep that
//! visits every node exactly once.
//!
//! Conventions:
//! * tensors are dense row-major f64; matrix ops take 2-D operands, biases
//!   and norm parameters are 1-D, scalars have shape `[1]`;
//! * no implicit broadcasting — the only batched forms are the explicit
//!   per-row ops ([`Graph::add_row`], [`Graph::softmax_rows`], ...);
//! * zero-row tensors are legal everywhere (an empty prompt block simply
//!   contributes no rows);
//! * a node participates in backward iff `requires_grad`, which propagates
//!   from leaves through every op.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a node in its graph. Only meaningful for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `a[m×k] · b[k×n]`
    Matmul { a: NodeId, b: NodeId },
    /// `a[m×k] · b[n×k]ᵀ` — saves an explicit transpose for similarity maps.
    MatmulNt { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    /// `a[r×d] + row[d]` broadcast down rows.
    AddRow { a: NodeId, row: NodeId },
    Gelu { a: NodeId },
    Abs { a: NodeId },
    /// Row-wise softmax over the last axis of a 2-D tensor.
    SoftmaxRows { a: NodeId },
    /// Row-wise `(x-μ)/√(σ²+eps) · gain + bias` with population variance.
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    /// Row-wise L2 normalisation.
    NormalizeRows { a: NodeId },
    /// Row gather from an embedding table; backward scatter-adds so gradient
    /// reaches exactly the looked-up rows.
    Embed { table: NodeId, ids: Vec<usize> },
    ConcatRows { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
    SliceRows {
        a: NodeId,
        start: usize,
        len: usize,
    },
    SliceCols {
        a: NodeId,
        start: usize,
        len: usize,
    },
    SumAll { a: NodeId },
    /// `-(1/B)·Σ log p[i, labels[i]]` from an already-normalised probability
    /// batch.
    NllFromProbs { probs: NodeId, labels: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert an input node. `requires_grad` marks trainable leaves; frozen
    /// parameters and data enter with `false` and never receive gradient.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that never takes gradient (data, masks, cached features).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient, present only after `backward` reached this node.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn dims2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    // ── forward ops ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let (da, db) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::from_vec(&[m, n], out)?,
            Op::Matmul { a, b },
            rg,
        ))
    }

    /// `a · bᵀ`: rows of `a` against rows of `b`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let (da, db) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &da[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &db[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::from_vec(&[m, n], out)?,
            Op::MatmulNt { a, b },
            rg,
        ))
    }

    fn elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_vec(&shape, out)?, op, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let out: Vec<f64> = self.nodes[a.0].value.data().iter().map(|&x| c * x).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Scale { a, c }, rg))
    }

    /// Add a 1-D bias row to every row of a 2-D tensor.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (r, d) = self.dims2(a, "add_row")?;
        if self.shape(row) != [d] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let (da, dr) = (self.nodes[a.0].value.data(), self.nodes[row.0].value.data());
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            for j in 0..d {
                out[i * d + j] = da[i * d + j] + dr[j];
            }
        }
        let rg = self.any_grad(&[a, row]);
        Ok(self.push(
            Tensor::from_vec(&[r, d], out)?,
            Op::AddRow { a, row },
            rg,
        ))
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.nodes[a.0].value.data().iter().map(|&x| gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Gelu { a }, rg))
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.nodes[a.0].value.data().iter().map(|&x| x.abs()).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Abs { a }, rg))
    }

    /// Numerically-stable softmax along the last axis of a 2-D tensor.
    /// Additive masks of `-1e30` underflow to exactly zero weight after the
    /// max shift; callers guard against fully-masked rows.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2(a, "softmax_rows")?;
        if c == 0 && r > 0 {
            return Err(Error::Domain("softmax over an empty axis".into()));
        }
        let da = self.nodes[a.0].value.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &da[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * c..(i + 1) * c];
            let mut s = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                orow[j] = e;
                s += e;
            }
            for v in orow.iter_mut() {
                *v /= s;
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(
            Tensor::from_vec(&[r, c], out)?,
            Op::SoftmaxRows { a },
            rg,
        ))
    }

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (r, d) = self.dims2(x, "layer_norm")?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        if d == 0 && r > 0 {
            return Err(Error::Domain("layer_norm over an empty axis".into()));
        }
        let dx = self.nodes[x.0].value.data();
        let (dg, db) = (
            self.nodes[gain.0].value.data(),
            self.nodes[bias.0].value.data(),
        );
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            let row = &dx[i * d..(i + 1) * d];
            let (mu, inv_std) = row_stats(row, eps);
            let orow = &mut out[i * d..(i + 1) * d];
            for j in 0..d {
                orow[j] = (row[j] - mu) * inv_std * dg[j] + db[j];
            }
        }
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_vec(&[r, d], out)?,
            Op::LayerNorm { x, gain, bias, eps },
            rg,
        ))
    }

    /// L2-normalise each row. Errors on any zero-norm row (cosine similarity
    /// is undefined there).
    pub fn normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, d) = self.dims2(a, "normalize_rows")?;
        let da = self.nodes[a.0].value.data();
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            let row = &da[i * d..(i + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Domain(format!(
                    "cannot L2-normalise zero-norm row {i}"
                )));
            }
            for j in 0..d {
                out[i * d + j] = row[j] / norm;
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(
            Tensor::from_vec(&[r, d], out)?,
            Op::NormalizeRows { a },
            rg,
        ))
    }

    /// Gather rows `ids` from a `[V × d]` table.
    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, d) = self.dims2(table, "embed")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Usage(format!(
                "embedding id {bad} out of range for table of {v} rows"
            )));
        }
        let dt = self.nodes[table.0].value.data();
        let mut out = vec![0.0; ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            out[i * d..(i + 1) * d].copy_from_slice(&dt[id * d..(id + 1) * d]);
        }
        let rg = self.nodes[table.0].requires_grad;
        Ok(self.push(
            Tensor::from_vec(&[ids.len(), d], out)?,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Stack 2-D parts vertically. All parts must agree on column count;
    /// zero-row parts are allowed and contribute nothing.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_rows of zero parts".into()));
        }
        let (_, d) = self.dims2(parts[0], "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, dp) = self.dims2(p, "concat_rows")?;
            if dp != d {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * d);
        for &p in parts {
            out.extend_from_slice(self.nodes[p.0].value.data());
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::from_vec(&[rows, d], out)?,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Stack 2-D parts side by side (same row count each).
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_cols of zero parts".into()));
        }
        let (r, _) = self.dims2(parts[0], "concat_cols")?;
        let mut cols = 0;
        for &p in parts {
            let (rp, c) = self.dims2(p, "concat_cols")?;
            if rp != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            cols += c;
        }
        let mut out = vec![0.0; r * cols];
        let mut offset = 0;
        for &p in parts {
            let (_, c) = self.dims2(p, "concat_cols")?;
            let dp = self.nodes[p.0].value.data();
            for i in 0..r {
                out[i * cols + offset..i * cols + offset + c]
                    .copy_from_slice(&dp[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::from_vec(&[r, cols], out)?,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, d) = self.dims2(a, "slice_rows")?;
        if start + len > r {
            return Err(Error::Usage(format!(
                "slice_rows [{start}, {}) out of range for {r} rows",
                start + len
            )));
        }
        let da = self.nodes[a.0].value.data();
        let out = da[start * d..(start + len) * d].to_vec();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(
            Tensor::from_vec(&[len, d], out)?,
            Op::SliceRows { a, start, len },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, d) = self.dims2(a, "slice_cols")?;
        if start + len > d {
            return Err(Error::Usage(format!(
                "slice_cols [{start}, {}) out of range for {d} cols",
                start + len
            )));
        }
        let da = self.nodes[a.0].value.data();
        let mut out = vec![0.0; r * len];
        for i in 0..r {
            out[i * len..(i + 1) * len]
                .copy_from_slice(&da[i * d + start..i * d + start + len]);
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(
            Tensor::from_vec(&[r, len], out)?,
            Op::SliceCols { a, start, len },
            rg,
        ))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Tensor::scalar(s), Op::SumAll { a }, rg))
    }

    /// Mean negative log-likelihood of the labelled entries of an
    /// already-normalised probability batch. Probabilities must be positive
    /// at the labelled positions.
    pub fn nll_from_probs(&mut self, probs: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (b, c) = self.dims2(probs, "nll_from_probs")?;
        if labels.len() != b {
            return Err(Error::Usage(format!(
                "{} labels for a batch of {b} probability rows",
                labels.len()
            )));
        }
        if b == 0 {
            return Err(Error::Usage("nll_from_probs over an empty batch".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Usage(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let dp = self.nodes[probs.0].value.data();
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            total -= dp[i * c + y].ln();
        }
        let rg = self.nodes[probs.0].requires_grad;
        Ok(self.push(
            Tensor::scalar(total / b as f64),
            Op::NllFromProbs {
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Clear accumulated gradients on every node. Must be called between
    /// backward passes unless accumulation is wanted.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Reverse sweep from a scalar `loss` node. Gradients land on every
    /// `requires_grad` node reachable from `loss` and *accumulate* across
    /// repeated calls until [`Graph::zero_grads`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        // Pass-local flow buffers; persisted into node.grad at visit time so
        // separate backward calls accumulate rather than double-count.
        let mut flow: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        flow[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = flow[i].take() else { continue };
            let contribs = self.vjp(i, &g);
            for (id, c) in contribs {
                let buf = flow[id.0]
                    .get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.numel()]);
                for (dst, src) in buf.iter_mut().zip(&c) {
                    *dst += src;
                }
            }
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => {
                    for (dst, src) in acc.data_mut().iter_mut().zip(&g) {
                        *dst += src;
                    }
                }
                None => {
                    node.grad = Some(
                        Tensor::from_vec(&node.value.shape().to_vec(), g)
                            .expect("flow buffer matches node shape"),
                    );
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian product of node `i` given upstream gradient `g`.
    /// Returns contributions only for inputs that require gradient.
    fn vjp(&self, i: usize, g: &[f64]) -> Vec<(NodeId, Vec<f64>)> {
        let mut out: Vec<(NodeId, Vec<f64>)> = Vec::new();
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        let val = |id: NodeId| self.nodes[id.0].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if needs(*a) {
                    // dA = G · Bᵀ
                    let db = val(*b);
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..k {
                            let brow = &db[j * n..(j + 1) * n];
                            da[i * k + j] = g[i * n..(i + 1) * n]
                                .iter()
                                .zip(brow)
                                .map(|(x, y)| x * y)
                                .sum();
                        }
                    }
                    out.push((*a, da));
                }
                if needs(*b) {
                    // dB = Aᵀ · G
                    let da_v = val(*a);
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = da_v[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let grow = &g[i * n..(i + 1) * n];
                            let drow = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                drow[j] += av * grow[j];
                            }
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::MatmulNt { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if needs(*a) {
                    // dA = G · B
                    let db = val(*b);
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            let brow = &db[j * k..(j + 1) * k];
                            let drow = &mut da[i * k..(i + 1) * k];
                            for p in 0..k {
                                drow[p] += gv * brow[p];
                            }
                        }
                    }
                    out.push((*a, da));
                }
                if needs(*b) {
                    // dB = Gᵀ · A
                    let da_v = val(*a);
                    let mut db = vec![0.0; n * k];
                    for i in 0..m {
                        let arow = &da_v[i * k..(i + 1) * k];
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            let drow = &mut db[j * k..(j + 1) * k];
                            for p in 0..k {
                                drow[p] += gv * arow[p];
                            }
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::Add { a, b } => {
                if needs(*a) {
                    out.push((*a, g.to_vec()));
                }
                if needs(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::Sub { a, b } => {
                if needs(*a) {
                    out.push((*a, g.to_vec()));
                }
                if needs(*b) {
                    out.push((*b, g.iter().map(|v| -v).collect()));
                }
            }
            Op::Mul { a, b } => {
                if needs(*a) {
                    out.push((*a, g.iter().zip(val(*b)).map(|(x, y)| x * y).collect()));
                }
                if needs(*b) {
                    out.push((*b, g.iter().zip(val(*a)).map(|(x, y)| x * y).collect()));
                }
            }
            Op::Scale { a, c } => {
                if needs(*a) {
                    out.push((*a, g.iter().map(|v| c * v).collect()));
                }
            }
            Op::AddRow { a, row } => {
                let d = self.shape(*row)[0];
                if needs(*a) {
                    out.push((*a, g.to_vec()));
                }
                if needs(*row) {
                    let mut dr = vec![0.0; d];
                    for chunk in g.chunks(d) {
                        for j in 0..d {
                            dr[j] += chunk[j];
                        }
                    }
                    out.push((*row, dr));
                }
            }
            Op::Gelu { a } => {
                if needs(*a) {
                    out.push((
                        *a,
                        g.iter()
                            .zip(val(*a))
                            .map(|(gv, &x)| gv * gelu_grad(x))
                            .collect(),
                    ));
                }
            }
            Op::Abs { a } => {
                if needs(*a) {
                    out.push((
                        *a,
                        g.iter()
                            .zip(val(*a))
                            .map(|(gv, &x)| {
                                // subgradient 0 at the kink
                                gv * if x > 0.0 {
                                    1.0
                                } else if x < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            })
                            .collect(),
                    ));
                }
            }
            Op::SoftmaxRows { a } => {
                if needs(*a) {
                    let y = self.nodes[i].value.data();
                    let c = self.shape(*a)[1];
                    let mut dx = vec![0.0; y.len()];
                    for r in 0..self.shape(*a)[0] {
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(x, y)| x * y).sum();
                        let dr = &mut dx[r * c..(r + 1) * c];
                        for j in 0..c {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    out.push((*a, dx));
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (r, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let dx_v = val(*x);
                let dg_v = val(*gain);
                let mut dx = if needs(*x) { vec![0.0; r * d] } else { vec![] };
                let mut dgain = if needs(*gain) { vec![0.0; d] } else { vec![] };
                let mut dbias = if needs(*bias) { vec![0.0; d] } else { vec![] };
                for row_i in 0..r {
                    let row = &dx_v[row_i * d..(row_i + 1) * d];
                    let (mu, inv_std) = row_stats(row, *eps);
                    let gr = &g[row_i * d..(row_i + 1) * d];
                    // x̂ recomputed rather than cached: cheap and keeps nodes small.
                    if !dgain.is_empty() || !dbias.is_empty() {
                        for j in 0..d {
                            let xhat = (row[j] - mu) * inv_std;
                            if !dgain.is_empty() {
                                dgain[j] += gr[j] * xhat;
                            }
                            if !dbias.is_empty() {
                                dbias[j] += gr[j];
                            }
                        }
                    }
                    if !dx.is_empty() {
                        let mut mean_gg = 0.0;
                        let mut mean_ggx = 0.0;
                        for j in 0..d {
                            let gg = gr[j] * dg_v[j];
                            let xhat = (row[j] - mu) * inv_std;
                            mean_gg += gg;
                            mean_ggx += gg * xhat;
                        }
                        mean_gg /= d as f64;
                        mean_ggx /= d as f64;
                        let drow = &mut dx[row_i * d..(row_i + 1) * d];
                        for j in 0..d {
                            let gg = gr[j] * dg_v[j];
                            let xhat = (row[j] - mu) * inv_std;
                            drow[j] = inv_std * (gg - mean_gg - xhat * mean_ggx);
                        }
                    }
                }
                if !dx.is_empty() {
                    out.push((*x, dx));
                }
                if !dgain.is_empty() {
                    out.push((*gain, dgain));
                }
                if !dbias.is_empty() {
                    out.push((*bias, dbias));
                }
            }
            Op::NormalizeRows { a } => {
                if needs(*a) {
                    let (r, d) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let xv = val(*a);
                    let yv = self.nodes[i].value.data();
                    let mut dx = vec![0.0; r * d];
                    for row_i in 0..r {
                        let xr = &xv[row_i * d..(row_i + 1) * d];
                        let yr = &yv[row_i * d..(row_i + 1) * d];
                        let gr = &g[row_i * d..(row_i + 1) * d];
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        let dr = &mut dx[row_i * d..(row_i + 1) * d];
                        for j in 0..d {
                            dr[j] = (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                    out.push((*a, dx));
                }
            }
            Op::Embed { table, ids } => {
                if needs(*table) {
                    let d = self.shape(*table)[1];
                    let mut dt = vec![0.0; self.nodes[table.0].value.numel()];
                    for (row_i, &id) in ids.iter().enumerate() {
                        let gr = &g[row_i * d..(row_i + 1) * d];
                        let dr = &mut dt[id * d..(id + 1) * d];
                        for j in 0..d {
                            dr[j] += gr[j];
                        }
                    }
                    out.push((*table, dt));
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.numel();
                    if needs(p) {
                        out.push((p, g[offset..offset + n].to_vec()));
                    }
                    offset += n;
                }
            }
            Op::ConcatCols { parts } => {
                let r = self.shape(parts[0])[0];
                let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if needs(p) {
                        let mut dp = vec![0.0; r * c];
                        for i in 0..r {
                            dp[i * c..(i + 1) * c]
                                .copy_from_slice(&g[i * total + offset..i * total + offset + c]);
                        }
                        out.push((p, dp));
                    }
                    offset += c;
                }
            }
            Op::SliceRows { a, start, len } => {
                if needs(*a) {
                    let d = self.shape(*a)[1];
                    let mut da = vec![0.0; self.nodes[a.0].value.numel()];
                    da[start * d..(start + len) * d].copy_from_slice(g);
                    out.push((*a, da));
                }
            }
            Op::SliceCols { a, start, len } => {
                if needs(*a) {
                    let (r, d) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let mut da = vec![0.0; r * d];
                    for i in 0..r {
                        da[i * d + start..i * d + start + len]
                            .copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    out.push((*a, da));
                }
            }
            Op::SumAll { a } => {
                if needs(*a) {
                    out.push((*a, vec![g[0]; self.nodes[a.0].value.numel()]));
                }
            }
            Op::NllFromProbs { probs, labels } => {
                if needs(*probs) {
                    let (b, c) = (self.shape(*probs)[0], self.shape(*probs)[1]);
                    let pv = val(*probs);
                    let mut dp = vec![0.0; b * c];
                    for (i, &y) in labels.iter().enumerate() {
                        dp[i * c + y] = -g[0] / (b as f64 * pv[i * c + y]);
                    }
                    out.push((*probs, dp));
                }
            }
        }
        out
    }
}

/// Population mean and 1/√(σ²+eps) of a row.
fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mu = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
    (mu, 1.0 / (var + eps).sqrt())
}

/// Smooth GELU (tanh approximation): `0.5·x·(1 + tanh(√(2/π)(x + 0.044715x³)))`.
/// This is the one nonlinearity used by every FFN in the crate; for |x| ≥ 8 it
/// is the identity (positive side) or zero (negative side) to well below 1e-9.
pub fn gelu(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.7978845608028654;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.7978845608028654;
    let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x)
}
