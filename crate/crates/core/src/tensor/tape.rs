//! Reverse-mode autodiff over a per-forward-pass tape.
//!
//! A `Tape` records every operation of one forward computation in issue
//! order; node ids are append-only, so inputs always precede outputs and
//! the reverse sweep is a valid topological order (cycles are impossible
//! by construction). Each tape is confined to the thread that built it;
//! the `Tensor` values it produces are freely shareable.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

use crate::attention::AttentionMask;
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Gradient of the root with respect to each `requires_grad` leaf, keyed by
/// the leaf's node id on the tape.
pub type GradMap = HashMap<usize, Tensor>;

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

struct Node {
    value: Tensor,
    op: Op,
    /// True when some `requires_grad` leaf feeds this node.
    needs_grad: bool,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    /// [m,n] plus a length-n vector broadcast over rows.
    AddRowVec(usize, usize),
    Matmul(usize, usize),
    Sum(usize),
    Mean(usize),
    Silu(usize),
    RmsNorm { x: usize, w: usize, eps: f64 },
    Rope { x: usize, positions: Arc<Vec<u32>>, base: f64 },
    MaskedAttention { q: usize, k: usize, v: usize, mask: Arc<AttentionMask>, probs: Vec<f64> },
    SplitHeads { x: usize, heads: usize },
    MergeHeads { x: usize },
    GatherRows { x: usize, idx: Arc<Vec<usize>> },
    ScatterRows { pieces: Vec<(usize, Arc<Vec<usize>>)> },
    ConcatRows(Vec<usize>),
    EmbedLookup { table: usize, ids: Arc<Vec<u32>> },
    CrossEntropyMean { logits: usize, targets: Arc<Vec<u32>>, probs: Vec<f64> },
    BceLogitsMean { logits: usize, targets: Arc<Vec<f64>> },
    MseVsConst { x: usize, target: Tensor },
    Resize { x: usize },
    Reshape { x: usize },
}

/// Handle to one tape node. Copyable; owns nothing.
#[derive(Clone, Copy)]
pub struct Value<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), consumed: Cell::new(false) }
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Value<'_> {
        assert!(!self.consumed.get(), "tape already consumed by backward()");
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value, op, needs_grad });
        Value { tape: self, id }
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn val(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    /// Insert a leaf; `requires_grad` is taken from the tensor itself.
    pub fn leaf(&self, t: Tensor) -> Value<'_> {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Insert a non-differentiable constant leaf.
    pub fn constant(&self, t: Tensor) -> Value<'_> {
        self.push(t, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse sweep from a scalar root. Returns d(root)/d(leaf) for every
    /// `requires_grad` leaf, keyed by leaf id. The tape is consumed: any
    /// further recording or backward on it panics.
    pub fn backward(&self, root: Value<'_>) -> Result<GradMap> {
        assert!(!self.consumed.get(), "tape already consumed by backward()");
        assert!(std::ptr::eq(root.tape, self), "root belongs to a different tape");
        self.consumed.set(true);

        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if !root_node.value.is_scalar() {
            return Err(Error::NotScalar {
                context: "autodiff_backward",
                shape: root_node.value.shape().to_vec(),
            });
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.id] = Some(vec![1.0]);

        for id in (0..=root.id).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let mut send = |target: usize, contrib: Vec<f64>| {
                debug_assert!(target < id, "tape edge must point backward");
                if !nodes[target].needs_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contrib) {
                            *a += c;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {
                    // re-store: leaves keep their gradient for extraction
                    grads[id] = Some(g);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone());
                    send(*b, tensor::scale(&g, -1.0));
                }
                Op::Mul(a, b) => {
                    send(*a, tensor::mul(&g, nodes[*b].value.data()));
                    send(*b, tensor::mul(&g, nodes[*a].value.data()));
                }
                Op::Scale(a, c) => send(*a, tensor::scale(&g, *c)),
                Op::AddRowVec(a, b) => {
                    let n = nodes[*b].value.len();
                    let m = g.len() / n;
                    let mut col = vec![0.0; n];
                    for r in 0..m {
                        for j in 0..n {
                            col[j] += g[r * n + j];
                        }
                    }
                    send(*a, g);
                    send(*b, col);
                }
                Op::Matmul(a, b) => {
                    let (m, k) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
                    let n = nodes[*b].value.shape()[1];
                    // dA = G·Bᵀ, dB = Aᵀ·G
                    send(*a, tensor::matmul_bt(&g, nodes[*b].value.data(), m, n, k));
                    send(*b, tensor::matmul_at(nodes[*a].value.data(), &g, m, k, n));
                }
                Op::Sum(a) => {
                    let n = nodes[*a].value.len();
                    send(*a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = nodes[*a].value.len();
                    send(*a, vec![g[0] / n as f64; n]);
                }
                Op::Silu(a) => {
                    let x = nodes[*a].value.data();
                    send(*a, g.iter().zip(x).map(|(gv, &xv)| gv * tensor::silu_grad(xv)).collect());
                }
                Op::RmsNorm { x, w, eps } => {
                    let xs = nodes[*x].value.data();
                    let ws = nodes[*w].value.data();
                    let n = ws.len();
                    let rows = xs.len() / n;
                    let mut dx = vec![0.0; xs.len()];
                    let mut dw = vec![0.0; n];
                    for r in 0..rows {
                        let xr = &xs[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let ms = xr.iter().map(|v| v * v).sum::<f64>() / n as f64;
                        let inv = 1.0 / (ms + eps).sqrt();
                        // u = g ∘ w is the gradient wrt the normalized row
                        let mut dot = 0.0;
                        for j in 0..n {
                            let xh = xr[j] * inv;
                            dw[j] += gr[j] * xh;
                            dot += gr[j] * ws[j] * xh;
                        }
                        for j in 0..n {
                            let u = gr[j] * ws[j];
                            let xh = xr[j] * inv;
                            dx[r * n + j] = inv * (u - xh * dot / n as f64);
                        }
                    }
                    send(*x, dx);
                    send(*w, dw);
                }
                Op::Rope { x, positions, base } => {
                    // rotation is orthogonal: the adjoint rotates by -angle
                    send(*x, rope_apply(&g, nodes[*x].value.shape(), positions, *base, true));
                }
                Op::MaskedAttention { q, k, v, mask, probs } => {
                    let (dq, dk, dv) = masked_attention_backward(
                        &g,
                        nodes[*q].value.data(),
                        nodes[*k].value.data(),
                        nodes[*v].value.data(),
                        nodes[*q].value.shape(),
                        mask,
                        probs,
                    );
                    send(*q, dq);
                    send(*k, dk);
                    send(*v, dv);
                }
                Op::SplitHeads { x, heads } => {
                    let shape = node.value.shape();
                    let (h, n, dh) = (shape[0], shape[1], shape[2]);
                    debug_assert_eq!(h, *heads);
                    let mut dx = vec![0.0; h * n * dh];
                    for hh in 0..h {
                        for i in 0..n {
                            for j in 0..dh {
                                dx[i * (h * dh) + hh * dh + j] = g[hh * n * dh + i * dh + j];
                            }
                        }
                    }
                    send(*x, dx);
                }
                Op::MergeHeads { x } => {
                    let shape = nodes[*x].value.shape();
                    let (h, n, dh) = (shape[0], shape[1], shape[2]);
                    let mut dx = vec![0.0; h * n * dh];
                    for hh in 0..h {
                        for i in 0..n {
                            for j in 0..dh {
                                dx[hh * n * dh + i * dh + j] = g[i * (h * dh) + hh * dh + j];
                            }
                        }
                    }
                    send(*x, dx);
                }
                Op::GatherRows { x, idx } => {
                    let cols = nodes[*x].value.shape()[1];
                    let mut dx = vec![0.0; nodes[*x].value.len()];
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..cols {
                            dx[src * cols + j] += g[r * cols + j];
                        }
                    }
                    send(*x, dx);
                }
                Op::ScatterRows { pieces } => {
                    let cols = node.value.shape()[1];
                    for (src, idx) in pieces {
                        let mut dp = vec![0.0; nodes[*src].value.len()];
                        for (r, &dst) in idx.iter().enumerate() {
                            dp[r * cols..(r + 1) * cols]
                                .copy_from_slice(&g[dst * cols..(dst + 1) * cols]);
                        }
                        send(*src, dp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let cols = node.value.shape()[1];
                    let mut off = 0;
                    for p in parts {
                        let rows = nodes[*p].value.shape()[0];
                        send(*p, g[off * cols..(off + rows) * cols].to_vec());
                        off += rows;
                    }
                }
                Op::EmbedLookup { table, ids } => {
                    let cols = nodes[*table].value.shape()[1];
                    let mut dt = vec![0.0; nodes[*table].value.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        let row = id as usize;
                        for j in 0..cols {
                            dt[row * cols + j] += g[r * cols + j];
                        }
                    }
                    send(*table, dt);
                }
                Op::CrossEntropyMean { logits, targets, probs } => {
                    let vocab = nodes[*logits].value.shape()[1];
                    let n = targets.len();
                    let mut dl = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        dl[i * vocab + t as usize] -= 1.0;
                    }
                    let s = g[0] / n as f64;
                    for v in dl.iter_mut() {
                        *v *= s;
                    }
                    send(*logits, dl);
                }
                Op::BceLogitsMean { logits, targets } => {
                    let z = nodes[*logits].value.data();
                    let count = z.len() as f64;
                    let s = g[0] / count;
                    let dl = z
                        .iter()
                        .zip(targets.iter())
                        .map(|(&zv, &t)| s * (tensor::sigmoid(zv) - t))
                        .collect();
                    send(*logits, dl);
                }
                Op::MseVsConst { x, target } => {
                    let xs = nodes[*x].value.data();
                    let count = xs.len() as f64;
                    let s = 2.0 * g[0] / count;
                    send(*x, xs.iter().zip(target.data()).map(|(&a, &b)| s * (a - b)).collect());
                }
                Op::Resize { x } => {
                    let xin = nodes[*x].value.shape();
                    let out = node.value.shape();
                    send(
                        *x,
                        tensor::bilinear_resize_adjoint(&g, xin[0], xin[1], xin[2], out[1], out[2]),
                    );
                }
                Op::Reshape { x } => send(*x, g),
            }
        }

        let mut map = GradMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                if let Some(g) = grads[id].take() {
                    map.insert(id, Tensor::new(node.value.shape().to_vec(), g));
                }
            }
        }
        Ok(map)
    }
}

impl<'t> Value<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.val(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn unary(self, value: Tensor, op: Op) -> Value<'t> {
        let ng = self.tape.needs(self.id);
        self.tape.push(value, op, ng)
    }

    fn binary(self, other: Value<'t>, value: Tensor, op: Op) -> Value<'t> {
        let ng = self.tape.needs(self.id) || self.tape.needs(other.id);
        self.tape.push(value, op, ng)
    }

    pub fn add(self, other: Value<'t>) -> Value<'t> {
        let (a, b) = (self.value(), other.value());
        a.check_same_shape(&b, "add").expect("add: shape mismatch");
        let out = Tensor::new(a.shape().to_vec(), tensor::add(a.data(), b.data()));
        self.binary(other, out, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Value<'t>) -> Value<'t> {
        let (a, b) = (self.value(), other.value());
        a.check_same_shape(&b, "sub").expect("sub: shape mismatch");
        let out = Tensor::new(a.shape().to_vec(), tensor::sub(a.data(), b.data()));
        self.binary(other, out, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Value<'t>) -> Value<'t> {
        let (a, b) = (self.value(), other.value());
        a.check_same_shape(&b, "mul").expect("mul: shape mismatch");
        let out = Tensor::new(a.shape().to_vec(), tensor::mul(a.data(), b.data()));
        self.binary(other, out, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, c: f64) -> Value<'t> {
        let a = self.value();
        let out = Tensor::new(a.shape().to_vec(), tensor::scale(a.data(), c));
        self.unary(out, Op::Scale(self.id, c))
    }

    /// Broadcast-add a length-n vector to every row of an [m,n] matrix.
    pub fn add_row_vec(self, bias: Value<'t>) -> Value<'t> {
        let (a, b) = (self.value(), bias.value());
        assert_eq!(a.rank(), 2);
        assert_eq!(a.shape()[1], b.len(), "add_row_vec: width mismatch");
        let n = b.len();
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, &y) in row.iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        let out = Tensor::new(a.shape().to_vec(), data);
        self.binary(bias, out, Op::AddRowVec(self.id, bias.id))
    }

    pub fn matmul(self, other: Value<'t>) -> Value<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.rank(), 2, "matmul expects rank-2 lhs");
        assert_eq!(b.rank(), 2, "matmul expects rank-2 rhs");
        assert_eq!(a.shape()[1], b.shape()[0], "matmul: inner extents differ");
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let out = Tensor::new(vec![m, n], tensor::matmul(a.data(), b.data(), m, k, n));
        self.binary(other, out, Op::Matmul(self.id, other.id))
    }

    pub fn sum(self) -> Value<'t> {
        let a = self.value();
        let out = Tensor::scalar(a.data().iter().sum());
        self.unary(out, Op::Sum(self.id))
    }

    pub fn mean(self) -> Value<'t> {
        let a = self.value();
        let out = Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64);
        self.unary(out, Op::Mean(self.id))
    }

    pub fn silu(self) -> Value<'t> {
        let a = self.value();
        let out = a.map(tensor::silu);
        self.unary(out, Op::Silu(self.id))
    }

    /// Row-wise RMS normalization with a learned weight vector.
    pub fn rms_norm(self, weight: Value<'t>, eps: f64) -> Value<'t> {
        let (a, w) = (self.value(), weight.value());
        let n = w.len();
        assert_eq!(a.shape().last().copied(), Some(n), "rms_norm: weight width mismatch");
        let mut data = vec![0.0; a.len()];
        for (orow, xrow) in data.chunks_mut(n).zip(a.data().chunks(n)) {
            tensor::rms_norm_row(xrow, w.data(), eps, orow);
        }
        let out = Tensor::new(a.shape().to_vec(), data);
        self.binary(weight, out, Op::RmsNorm { x: self.id, w: weight.id, eps })
    }

    /// Rotary position embedding over [heads, n, head_dim].
    pub fn rope(self, positions: Arc<Vec<u32>>, base: f64) -> Value<'t> {
        let a = self.value();
        assert_eq!(a.rank(), 3, "rope expects [heads, n, head_dim]");
        assert_eq!(a.shape()[1], positions.len(), "rope: positions length mismatch");
        assert_eq!(a.shape()[2] % 2, 0, "rope requires an even head dimension");
        let data = rope_apply(a.data(), a.shape(), &positions, base, false);
        let out = Tensor::new(a.shape().to_vec(), data);
        self.unary(out, Op::Rope { x: self.id, positions, base })
    }

    /// [n, heads·dh] → [heads, n, dh]
    pub fn split_heads(self, heads: usize) -> Value<'t> {
        let a = self.value();
        assert_eq!(a.rank(), 2);
        let (n, width) = (a.shape()[0], a.shape()[1]);
        assert_eq!(width % heads, 0);
        let dh = width / heads;
        let mut data = vec![0.0; a.len()];
        for h in 0..heads {
            for i in 0..n {
                for j in 0..dh {
                    data[h * n * dh + i * dh + j] = a.data()[i * width + h * dh + j];
                }
            }
        }
        let out = Tensor::new(vec![heads, n, dh], data);
        self.unary(out, Op::SplitHeads { x: self.id, heads })
    }

    /// [heads, n, dh] → [n, heads·dh]
    pub fn merge_heads(self) -> Value<'t> {
        let a = self.value();
        assert_eq!(a.rank(), 3);
        let (h, n, dh) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let mut data = vec![0.0; a.len()];
        for hh in 0..h {
            for i in 0..n {
                for j in 0..dh {
                    data[i * (h * dh) + hh * dh + j] = a.data()[hh * n * dh + i * dh + j];
                }
            }
        }
        let out = Tensor::new(vec![n, h * dh], data);
        self.unary(out, Op::MergeHeads { x: self.id })
    }

    pub fn gather_rows(self, idx: Arc<Vec<usize>>) -> Value<'t> {
        let a = self.value();
        assert_eq!(a.rank(), 2);
        let cols = a.shape()[1];
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &r in idx.iter() {
            data.extend_from_slice(&a.data()[r * cols..(r + 1) * cols]);
        }
        let out = Tensor::new(vec![idx.len(), cols], data);
        self.unary(out, Op::GatherRows { x: self.id, idx })
    }

    /// Reassemble a full [rows, cols] matrix from row groups. The index sets
    /// must partition 0..rows.
    pub fn scatter_rows(pieces: Vec<(Value<'t>, Arc<Vec<usize>>)>, rows: usize) -> Value<'t> {
        assert!(!pieces.is_empty());
        let tape = pieces[0].0.tape;
        let cols = pieces[0].0.value().shape()[1];
        let mut data = vec![0.0; rows * cols];
        let mut seen = vec![false; rows];
        for (v, idx) in &pieces {
            let t = v.value();
            assert_eq!(t.shape()[0], idx.len());
            assert_eq!(t.shape()[1], cols);
            for (r, &dst) in idx.iter().enumerate() {
                assert!(!seen[dst], "scatter_rows: duplicate destination row");
                seen[dst] = true;
                data[dst * cols..(dst + 1) * cols]
                    .copy_from_slice(&t.data()[r * cols..(r + 1) * cols]);
            }
        }
        assert!(seen.iter().all(|&s| s), "scatter_rows: rows not fully covered");
        let ng = pieces.iter().any(|(v, _)| tape.needs(v.id));
        let op_pieces = pieces.iter().map(|(v, idx)| (v.id, Arc::clone(idx))).collect();
        tape.push(
            Tensor::new(vec![rows, cols], data),
            Op::ScatterRows { pieces: op_pieces },
            ng,
        )
    }

    pub fn concat_rows(parts: &[Value<'t>]) -> Value<'t> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let cols = parts[0].value().shape()[1];
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = p.value();
            assert_eq!(t.shape()[1], cols, "concat_rows: column mismatch");
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let ng = parts.iter().any(|p| tape.needs(p.id));
        tape.push(
            Tensor::new(vec![rows, cols], data),
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
            ng,
        )
    }

    /// Row lookup into an embedding table: ids index [vocab, width].
    pub fn embed_lookup(self, ids: Arc<Vec<u32>>) -> Value<'t> {
        let table = self.value();
        assert_eq!(table.rank(), 2);
        let cols = table.shape()[1];
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids.iter() {
            let r = id as usize;
            assert!(r < table.shape()[0], "embed_lookup: id {r} out of vocab");
            data.extend_from_slice(&table.data()[r * cols..(r + 1) * cols]);
        }
        let out = Tensor::new(vec![ids.len(), cols], data);
        self.unary(out, Op::EmbedLookup { table: self.id, ids })
    }

    /// Mean cross entropy of [n, vocab] logits against integer targets.
    pub fn cross_entropy_mean(self, targets: Arc<Vec<u32>>) -> Result<Value<'t>> {
        let logits = self.value();
        if targets.is_empty() {
            return Err(Error::EmptyTargets("ntp_loss"));
        }
        if logits.rank() != 2 || logits.shape()[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                context: "ntp_loss",
                expected: vec![targets.len(), 0],
                got: logits.shape().to_vec(),
            });
        }
        let vocab = logits.shape()[1];
        let mut probs = vec![0.0; logits.len()];
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            assert!((t as usize) < vocab, "ntp target out of vocabulary");
            let row = &logits.data()[i * vocab..(i + 1) * vocab];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &l in row {
                z += (l - mx).exp();
            }
            let lse = mx + z.ln();
            loss += lse - row[t as usize];
            for (j, &l) in row.iter().enumerate() {
                probs[i * vocab + j] = (l - lse).exp();
            }
        }
        loss /= targets.len() as f64;
        Ok(self.unary(
            Tensor::scalar(loss),
            Op::CrossEntropyMean { logits: self.id, targets, probs },
        ))
    }

    /// Mean per-element binary cross entropy with {0,1} targets on logits.
    pub fn bce_with_logits_mean(self, targets: Arc<Vec<f64>>) -> Result<Value<'t>> {
        let logits = self.value();
        if logits.len() != targets.len() {
            return Err(Error::ShapeMismatch {
                context: "nsp_loss",
                expected: vec![targets.len()],
                got: vec![logits.len()],
            });
        }
        if targets.is_empty() {
            return Err(Error::EmptyTargets("nsp_loss"));
        }
        let mut loss = 0.0;
        for (&z, &t) in logits.data().iter().zip(targets.iter()) {
            debug_assert!(t == 0.0 || t == 1.0);
            loss += z.max(0.0) - z * t + tensor::softplus(-z.abs());
        }
        loss /= targets.len() as f64;
        Ok(self.unary(Tensor::scalar(loss), Op::BceLogitsMean { logits: self.id, targets }))
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse_vs_const(self, target: &Tensor) -> Value<'t> {
        let x = self.value();
        x.check_same_shape(target, "mse_vs_const").expect("mse_vs_const: shape mismatch");
        let loss = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            / x.len() as f64;
        self.unary(Tensor::scalar(loss), Op::MseVsConst { x: self.id, target: target.clone() })
    }

    /// Differentiable bilinear resize of a [C,h,w] map.
    pub fn resize(self, target: (usize, usize)) -> Result<Value<'t>> {
        let out = tensor::resize_plain(&self.value(), target)?;
        Ok(self.unary(out, Op::Resize { x: self.id }))
    }

    /// View the same row-major data under a new shape.
    pub fn reshape(self, shape: Vec<usize>) -> Value<'t> {
        let out = self.value().reshaped(shape);
        self.unary(out, Op::Reshape { x: self.id })
    }

    /// Masked softmax attention over [heads, n, dh] projections.
    pub fn masked_attention(
        q: Value<'t>,
        k: Value<'t>,
        v: Value<'t>,
        mask: Arc<AttentionMask>,
    ) -> Result<Value<'t>> {
        let (qt, kt, vt) = (q.value(), k.value(), v.value());
        qt.check_same_shape(&kt, "masked_attention")?;
        qt.check_same_shape(&vt, "masked_attention")?;
        if qt.rank() != 3 {
            return Err(Error::ShapeMismatch {
                context: "masked_attention",
                expected: vec![0, 0, 0],
                got: qt.shape().to_vec(),
            });
        }
        let (heads, n, dh) = (qt.shape()[0], qt.shape()[1], qt.shape()[2]);
        if mask.len() != n {
            return Err(Error::ShapeMismatch {
                context: "masked_attention mask",
                expected: vec![n],
                got: vec![mask.len()],
            });
        }
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; heads * n * dh];
        let mut probs = vec![0.0; heads * n * n];
        for h in 0..heads {
            let qh = &qt.data()[h * n * dh..(h + 1) * n * dh];
            let kh = &kt.data()[h * n * dh..(h + 1) * n * dh];
            let vh = &vt.data()[h * n * dh..(h + 1) * n * dh];
            for i in 0..n {
                let mut any = false;
                let mut mx = f64::NEG_INFINITY;
                let mut scores = Vec::new();
                for j in mask.allowed_iter(i) {
                    any = true;
                    let s = qh[i * dh..(i + 1) * dh]
                        .iter()
                        .zip(&kh[j * dh..(j + 1) * dh])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        * inv_sqrt;
                    mx = mx.max(s);
                    scores.push((j, s));
                }
                if !any {
                    return Err(Error::NoAllowedKey { query: i });
                }
                let mut z = 0.0;
                for (_, s) in scores.iter() {
                    z += (s - mx).exp();
                }
                for (j, s) in scores {
                    let p = (s - mx).exp() / z;
                    probs[h * n * n + i * n + j] = p;
                    for d in 0..dh {
                        out[h * n * dh + i * dh + d] += p * vh[j * dh + d];
                    }
                }
            }
        }
        let ng = q.tape.needs(q.id) || k.tape.needs(k.id) || v.tape.needs(v.id);
        Ok(q.tape.push(
            Tensor::new(vec![heads, n, dh], out),
            Op::MaskedAttention { q: q.id, k: k.id, v: v.id, mask, probs },
            ng,
        ))
    }
}

impl<'t> std::ops::Add for Value<'t> {
    type Output = Value<'t>;
    fn add(self, rhs: Value<'t>) -> Value<'t> {
        Value::add(self, rhs)
    }
}

impl<'t> std::ops::Sub for Value<'t> {
    type Output = Value<'t>;
    fn sub(self, rhs: Value<'t>) -> Value<'t> {
        Value::sub(self, rhs)
    }
}

impl<'t> std::ops::Mul for Value<'t> {
    type Output = Value<'t>;
    fn mul(self, rhs: Value<'t>) -> Value<'t> {
        Value::mul(self, rhs)
    }
}

/// Apply (or invert, for the adjoint) the rotary embedding to [heads,n,dh].
fn rope_apply(
    data: &[f64],
    shape: &[usize],
    positions: &[u32],
    base: f64,
    invert: bool,
) -> Vec<f64> {
    let (heads, n, dh) = (shape[0], shape[1], shape[2]);
    let half = dh / 2;
    let mut out = vec![0.0; data.len()];
    for h in 0..heads {
        for i in 0..n {
            let p = positions[i] as f64;
            let row = &data[h * n * dh + i * dh..h * n * dh + (i + 1) * dh];
            let orow = &mut out[h * n * dh + i * dh..h * n * dh + (i + 1) * dh];
            for j in 0..half {
                let theta = p * base.powf(-2.0 * j as f64 / dh as f64);
                let (sin, cos) = if invert { (-theta).sin_cos() } else { theta.sin_cos() };
                let (a, b) = (row[2 * j], row[2 * j + 1]);
                orow[2 * j] = a * cos - b * sin;
                orow[2 * j + 1] = a * sin + b * cos;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn masked_attention_backward(
    grad_out: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    shape: &[usize],
    mask: &AttentionMask,
    probs: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (heads, n, dh) = (shape[0], shape[1], shape[2]);
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    for h in 0..heads {
        let off = h * n * dh;
        let poff = h * n * n;
        for i in 0..n {
            let go = &grad_out[off + i * dh..off + (i + 1) * dh];
            // dp_ij = go · v_j ; ds_ij = p_ij (dp_ij − Σ_l p_il dp_il)
            let mut dot = 0.0;
            let mut dps = Vec::new();
            for j in mask.allowed_iter(i) {
                let p = probs[poff + i * n + j];
                let dp = go.iter().zip(&v[off + j * dh..off + (j + 1) * dh]).map(|(a, b)| a * b).sum::<f64>();
                dot += p * dp;
                dps.push((j, p, dp));
            }
            for (j, p, dp) in dps {
                let ds = p * (dp - dot) * inv_sqrt;
                for d in 0..dh {
                    dq[off + i * dh + d] += ds * k[off + j * dh + d];
                    dk[off + j * dh + d] += ds * q[off + i * dh + d];
                    dv[off + j * dh + d] += p * go[d];
                }
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn square_sum_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).with_grad());
        let loss = (x * x).sum();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads[&x.id()].data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn matmul_adjoint_is_ones_times_bt() {
        let tape = Tape::new();
        let mut rng = seeded(5);
        let a = tape.leaf(Tensor::randn(vec![2, 2], 1.0, &mut rng).with_grad());
        let b = tape.leaf(Tensor::randn(vec![2, 2], 1.0, &mut rng));
        let bt = b.value();
        let loss = a.matmul(b).sum();
        let grads = tape.backward(loss).unwrap();
        // d/dA sum(A·B) = ones · Bᵀ, i.e. every row equals B's row sums
        let ga = &grads[&a.id()];
        for i in 0..2 {
            for j in 0..2 {
                let expect: f64 = (0..2).map(|c| bt.data()[j * 2 + c]).sum();
                assert!((ga.data()[i * 2 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).with_grad());
        let y = x.scale(2.0);
        assert!(matches!(tape.backward(y), Err(Error::NotScalar { .. })));
    }

    #[test]
    #[should_panic(expected = "consumed")]
    fn tape_is_consumed_by_backward() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0).with_grad());
        let y = x.scale(3.0);
        tape.backward(y).unwrap();
        let _ = x.scale(1.0);
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).with_grad());
        let c = tape.constant(Tensor::new(vec![2], vec![3.0, 4.0]));
        let loss = (x * c).sum();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.contains_key(&x.id()));
        assert!(!grads.contains_key(&c.id()));
    }

    #[test]
    fn rope_position_zero_is_identity_and_norm_preserving() {
        let mut rng = seeded(9);
        let tape = Tape::new();
        let x = Tensor::randn(vec![2, 3, 8], 1.0, &mut rng);
        let v = tape.constant(x.clone());
        let r0 = v.rope(Arc::new(vec![0, 5, 9]), 10000.0);
        let out = r0.value();
        // position 0 row untouched
        for h in 0..2 {
            for j in 0..8 {
                assert_eq!(out.data()[h * 24 + j], x.data()[h * 24 + j]);
            }
        }
        // rotation preserves per-pair norms everywhere
        for h in 0..2 {
            for i in 0..3 {
                for j in 0..4 {
                    let o = h * 24 + i * 8 + 2 * j;
                    let n0 = x.data()[o].hypot(x.data()[o + 1]);
                    let n1 = out.data()[o].hypot(out.data()[o + 1]);
                    assert!((n0 - n1).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rope_dot_products_are_shift_invariant() {
        let mut rng = seeded(21);
        let q = Tensor::randn(vec![1, 1, 8], 1.0, &mut rng);
        let k = Tensor::randn(vec![1, 1, 8], 1.0, &mut rng);
        let dot = |p1: u32, p2: u32| -> f64 {
            let rq = rope_apply(q.data(), &[1, 1, 8], &[p1], 10000.0, false);
            let rk = rope_apply(k.data(), &[1, 1, 8], &[p2], 10000.0, false);
            rq.iter().zip(&rk).map(|(a, b)| a * b).sum()
        };
        let base = dot(3, 7);
        for c in [1u32, 10, 50] {
            assert!((dot(3 + c, 7 + c) - base).abs() < 1e-9);
        }
    }
}
