use std::sync::Arc;

use super::kernels;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous run of rows belonging to one sequence in a packed batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Rsqrt(Var),
    Silu(Var),
    MatMul(Var, Var),
    Linear(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    L1(Var),
    SqNorm(Var),
    SumLast(Var),
    LogSoftmax(Var),
    CausalSoftmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<Segment>,
        probs: Vec<T>,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv: Vec<T>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Gather {
        x: Var,
        idx: Vec<(usize, usize)>,
    },
    SegmentMean {
        x: Var,
        segments: Vec<Segment>,
    },
    WeightedRowSq {
        x: Var,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Wengert tape. Nodes are appended in evaluation order, so every node's
/// inputs precede it and a single reverse sweep visits each node once.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Leaves with `requires_grad` accumulate gradient
    /// across calls to [`Graph::backward`] until [`Graph::zero_grad`].
    pub fn leaf(&mut self, value: impl Into<Arc<Tensor<T>>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: value.into(),
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: impl Into<Arc<Tensor<T>>>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: impl Into<Arc<Tensor<T>>>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any has been propagated into it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(dim_err(op, sa, sb));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor {
            shape: va.shape().to_vec(),
            data,
        }
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let va = self.value(a);
        Tensor {
            shape: va.shape().to_vec(),
            data: va.data().iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.map(a, |x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn rsqrt(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x.sqrt().recip());
        self.push(out, Op::Rsqrt(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x / (T::one() + (-x).exp()));
        self.push(out, Op::Silu(a), &[a])
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(
            self.value(a).data(),
            self.value(b).data(),
            m,
            k,
            n,
            &mut out,
        );
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `x[n×k] · w[m×k]ᵀ`, the projection applied by a weight matrix stored
    /// as `d_out × d_in`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, k) = self.value(x).dims2()?;
        let (m, k2) = self.value(w).dims2()?;
        if k != k2 {
            return Err(dim_err("linear", self.shape(x), self.shape(w)));
        }
        let mut out = vec![T::zero(); n * m];
        kernels::linear(
            self.value(x).data(),
            self.value(w).data(),
            n,
            k,
            m,
            &mut out,
        );
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Linear(x, w), &[x, w]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    /// Copying reshape.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self
            .value(a)
            .reshape(shape)
            .map_err(|_| dim_err("reshape", self.shape(a), shape))?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Row lookup `table[ids[i]]`; the backward pass scatters into the table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.value(table).dims2()?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Input(format!(
                "embedding id {bad} out of range for table of {rows} rows"
            )));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tv.row(i));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = T::from_usize(v.numel().max(1)).unwrap();
        let s = v.data().iter().copied().sum::<T>() / n;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Entrywise L1 norm. The subgradient at exact zeros is zero.
    pub fn l1_norm(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|x| x.abs()).sum();
        self.push(Tensor::scalar(s), Op::L1(a), &[a])
    }

    /// Sum of squared entries.
    pub fn sq_norm(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|&x| x * x).sum();
        self.push(Tensor::scalar(s), Op::SqNorm(a), &[a])
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let shape = v.shape();
        let Some((&d, lead)) = shape.split_last() else {
            return Err(dim_err("sum_last", shape, &[0]));
        };
        let data: Vec<T> = v
            .data()
            .chunks_exact(d.max(1))
            .map(|c| c.iter().copied().sum())
            .collect();
        let t = Tensor::new(lead.to_vec(), data)?;
        Ok(self.push(t, Op::SumLast(a), &[a]))
    }

    /// Log-softmax along the last axis. Non-finite inputs are rejected.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if !v.is_finite() {
            return Err(Error::Numeric("log_softmax input".into()));
        }
        let d = *v
            .shape()
            .last()
            .ok_or_else(|| dim_err("log_softmax", &[], &[1]))?;
        let mut out = vec![T::zero(); v.numel()];
        for (x, o) in v.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            kernels::log_softmax_row(x, o);
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(t, Op::LogSoftmax(a), &[a]))
    }

    /// Row-wise softmax of a square score matrix where entry `(i, j)` is
    /// masked out for `j > i`.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if r != c {
            return Err(dim_err("causal_softmax", &[r, c], &[r, r]));
        }
        let mut out = vec![T::zero(); r * c];
        for (i, (x, o)) in self
            .value(a)
            .data()
            .chunks_exact(c)
            .zip(out.chunks_exact_mut(c))
            .enumerate()
        {
            kernels::masked_softmax_row(x, i + 1, o);
        }
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::CausalSoftmax(a), &[a]))
    }

    /// Multi-head causal self-attention over a packed batch. `q`, `k`, `v`
    /// are `[rows × d]`; each segment is an independent sequence and head
    /// `h` owns columns `h·d/heads .. (h+1)·d/heads`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Segment],
    ) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let (n, d) = self.value(q).dims2()?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "width {d} not divisible into {heads} heads"
            )));
        }
        if let Some(s) = segments.iter().find(|s| s.start + s.len > n) {
            return Err(Error::Input(format!("segment {s:?} exceeds {n} rows")));
        }
        let dh = d / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![T::zero(); n * d];
        let prob_len: usize = segments.iter().map(|s| heads * s.len * s.len).sum();
        let mut probs = vec![T::zero(); prob_len];
        let mut off = 0;
        let mut scores = Vec::new();
        for seg in segments {
            let l = seg.len;
            for h in 0..heads {
                let col = h * dh;
                let p = &mut probs[off..off + l * l];
                for i in 0..l {
                    let qi = &qv[(seg.start + i) * d + col..][..dh];
                    scores.clear();
                    for j in 0..=i {
                        let kj = &kv[(seg.start + j) * d + col..][..dh];
                        scores.push(kernels::dot(qi, kj) * scale);
                    }
                    kernels::masked_softmax_row(&scores, i + 1, &mut p[i * l..i * l + i + 1]);
                    let oi = &mut out[(seg.start + i) * d + col..][..dh];
                    for j in 0..=i {
                        let vj = &vv[(seg.start + j) * d + col..][..dh];
                        kernels::axpy(p[i * l + j], vj, oi);
                    }
                }
                off += l * l;
            }
        }
        let t = Tensor::new(vec![n, d], out)?;
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Root-mean-square normalization of each row followed by a learned
    /// per-feature gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if self.shape(gain) != [d] {
            return Err(dim_err("rms_norm", self.shape(x), self.shape(gain)));
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let dt = T::from_usize(d).unwrap();
        let mut inv = Vec::with_capacity(n);
        let mut out = vec![T::zero(); n * d];
        for (xi, oi) in xv.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let ms = kernels::dot(xi, xi) / dt;
            let r = (ms + eps).sqrt().recip();
            inv.push(r);
            for ((o, &a), &g) in oi.iter_mut().zip(xi).zip(gv) {
                *o = a * r * g;
            }
        }
        let t = Tensor::new(vec![n, d], out)?;
        Ok(self.push(t, Op::RmsNorm { x, gain, inv }, &[x, gain]))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Input(format!("row {bad} out of range for {n} rows")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(xv.row(r));
        }
        let t = Tensor::new(vec![rows.len(), d], out)?;
        Ok(self.push(
            t,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Picks `x[row, col]` for each index pair into a 1-D tensor.
    pub fn gather(&mut self, x: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if let Some(bad) = idx.iter().find(|(r, c)| *r >= n || *c >= d) {
            return Err(Error::Input(format!(
                "gather index {bad:?} out of range for [{n}, {d}]"
            )));
        }
        let xv = self.value(x).data();
        let out = idx.iter().map(|&(r, c)| xv[r * d + c]).collect();
        let t = Tensor::new(vec![idx.len()], out)?;
        Ok(self.push(
            t,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Mean of each segment of a flat tensor.
    pub fn segment_mean(&mut self, x: Var, segments: &[Segment]) -> Result<Var> {
        let xv = self.value(x).data();
        if let Some(s) = segments
            .iter()
            .find(|s| s.len == 0 || s.start + s.len > xv.len())
        {
            return Err(Error::Input(format!("bad segment {s:?}")));
        }
        let out = segments
            .iter()
            .map(|s| {
                xv[s.start..s.start + s.len].iter().copied().sum::<T>()
                    / T::from_usize(s.len).unwrap()
            })
            .collect();
        let t = Tensor::new(vec![segments.len()], out)?;
        Ok(self.push(
            t,
            Op::SegmentMean {
                x,
                segments: segments.to_vec(),
            },
            &[x],
        ))
    }

    /// `Σ_i w_i · ‖x_i‖²` over the rows of a matrix, with constant weights.
    pub fn weighted_row_sq(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if weights.len() != n {
            return Err(dim_err("weighted_row_sq", &[n, d], &[weights.len()]));
        }
        let s = self
            .value(x)
            .data()
            .chunks_exact(d)
            .zip(weights)
            .map(|(r, &w)| {
                if w == T::zero() {
                    T::zero()
                } else {
                    w * kernels::dot(r, r)
                }
            })
            .sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedRowSq {
                x,
                weights: weights.to_vec(),
            },
            &[x],
        ))
    }

    /// Reverse sweep from a scalar. Gradients are added to every reachable
    /// leaf that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<T>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut acc = Accum {
                nodes: &self.nodes,
                adj: &mut adj,
            };
            backprop_node(node, g, &mut acc, &mut leaf_grads, i);
        }

        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, x)| *b += *x),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }
}

struct Accum<'a, T> {
    nodes: &'a [Node<T>],
    adj: &'a mut [Option<Vec<T>>],
}

impl<T: Scalar> Accum<'_, T> {
    fn val(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Adjoint buffer for `v`, or `None` when `v` takes no gradient.
    fn buf(&mut self, v: Var) -> Option<&mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(self.adj[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }
}

fn backprop_node<T: Scalar>(
    node: &Node<T>,
    g: Vec<T>,
    acc: &mut Accum<'_, T>,
    leaf_grads: &mut Vec<(usize, Vec<T>)>,
    index: usize,
) {
    let out = node.value.data();
    match &node.op {
        Op::Leaf => leaf_grads.push((index, g)),
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(buf) = acc.buf(v) {
                    buf.iter_mut().zip(&g).for_each(|(x, &y)| *x += y);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(buf) = acc.buf(*a) {
                buf.iter_mut().zip(&g).for_each(|(x, &y)| *x += y);
            }
            if let Some(buf) = acc.buf(*b) {
                buf.iter_mut().zip(&g).for_each(|(x, &y)| *x -= y);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (acc.val(*a).to_vec(), acc.val(*b).to_vec());
            if let Some(buf) = acc.buf(*a) {
                for ((x, &gy), &y) in buf.iter_mut().zip(&g).zip(&bv) {
                    *x += gy * y;
                }
            }
            if let Some(buf) = acc.buf(*b) {
                for ((x, &gy), &y) in buf.iter_mut().zip(&g).zip(&av) {
                    *x += gy * y;
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(buf) = acc.buf(*a) {
                buf.iter_mut().zip(&g).for_each(|(x, &y)| *x += y * *c);
            }
        }
        Op::Rsqrt(a) => {
            let half = T::lit(-0.5);
            if let Some(buf) = acc.buf(*a) {
                for ((x, &gy), &y) in buf.iter_mut().zip(&g).zip(out) {
                    *x += gy * half * y * y * y;
                }
            }
        }
        Op::Silu(a) => {
            let av = acc.val(*a).to_vec();
            if let Some(buf) = acc.buf(*a) {
                for ((x, &gy), &z) in buf.iter_mut().zip(&g).zip(&av) {
                    let s = T::one() / (T::one() + (-z).exp());
                    *x += gy * s * (T::one() + z * (T::one() - s));
                }
            }
        }
        Op::MatMul(a, b) => {
            let sa = acc.nodes[a.0].value.shape();
            let sb = acc.nodes[b.0].value.shape();
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if acc.nodes[a.0].requires_grad {
                let bv = acc.nodes[b.0].value.clone();
                let mut tmp = vec![T::zero(); m * k];
                kernels::linear(&g, bv.data(), m, n, k, &mut tmp);
                let buf = acc.buf(*a).unwrap();
                buf.iter_mut().zip(&tmp).for_each(|(x, &y)| *x += y);
            }
            if acc.nodes[b.0].requires_grad {
                let av = acc.nodes[a.0].value.clone();
                let buf = acc.buf(*b).unwrap();
                for (ai, gi) in av.data().chunks_exact(k).zip(g.chunks_exact(n)) {
                    for (&aip, bp) in ai.iter().zip(buf.chunks_exact_mut(n)) {
                        kernels::axpy(aip, gi, bp);
                    }
                }
            }
        }
        Op::Linear(x, w) => {
            let sx = acc.nodes[x.0].value.shape();
            let sw = acc.nodes[w.0].value.shape();
            let (k, m) = (sx[1], sw[0]);
            if acc.nodes[x.0].requires_grad {
                let wv = acc.nodes[w.0].value.clone();
                kernels::linear_grad_input(&g, wv.data(), m, k, acc.buf(*x).unwrap());
            }
            if acc.nodes[w.0].requires_grad {
                let xv = acc.nodes[x.0].value.clone();
                kernels::linear_grad_weight(&g, xv.data(), m, k, acc.buf(*w).unwrap());
            }
        }
        Op::Transpose(a) => {
            let s = acc.nodes[a.0].value.shape();
            let (r, c) = (s[0], s[1]);
            if let Some(buf) = acc.buf(*a) {
                // g is [c × r]
                for i in 0..r {
                    for j in 0..c {
                        buf[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(buf) = acc.buf(*a) {
                buf.iter_mut().zip(&g).for_each(|(x, &y)| *x += y);
            }
        }
        Op::Embedding { table, ids } => {
            let d = acc.nodes[table.0].value.shape()[1];
            if let Some(buf) = acc.buf(*table) {
                for (&id, gi) in ids.iter().zip(g.chunks_exact(d)) {
                    buf[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(gi)
                        .for_each(|(x, &y)| *x += y);
                }
            }
        }
        Op::Sum(a) => {
            if let Some(buf) = acc.buf(*a) {
                buf.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(buf) = acc.buf(*a) {
                let n = T::from_usize(buf.len().max(1)).unwrap();
                let gm = g[0] / n;
                buf.iter_mut().for_each(|x| *x += gm);
            }
        }
        Op::L1(a) => {
            let av = acc.val(*a).to_vec();
            if let Some(buf) = acc.buf(*a) {
                for (x, &z) in buf.iter_mut().zip(&av) {
                    if z > T::zero() {
                        *x += g[0];
                    } else if z < T::zero() {
                        *x -= g[0];
                    }
                }
            }
        }
        Op::SqNorm(a) => {
            let av = acc.val(*a).to_vec();
            let two = T::lit(2.0);
            if let Some(buf) = acc.buf(*a) {
                for (x, &z) in buf.iter_mut().zip(&av) {
                    *x += two * g[0] * z;
                }
            }
        }
        Op::SumLast(a) => {
            let d = *acc.nodes[a.0].value.shape().last().unwrap();
            if let Some(buf) = acc.buf(*a) {
                for (row, &gi) in buf.chunks_exact_mut(d.max(1)).zip(&g) {
                    row.iter_mut().for_each(|x| *x += gi);
                }
            }
        }
        Op::LogSoftmax(a) => {
            let d = *node.value.shape().last().unwrap();
            if let Some(buf) = acc.buf(*a) {
                for ((row, gi), yi) in buf
                    .chunks_exact_mut(d)
                    .zip(g.chunks_exact(d))
                    .zip(out.chunks_exact(d))
                {
                    let gs: T = gi.iter().copied().sum();
                    for ((x, &gy), &y) in row.iter_mut().zip(gi).zip(yi) {
                        *x += gy - y.exp() * gs;
                    }
                }
            }
        }
        Op::CausalSoftmax(a) => {
            let c = node.value.shape()[1];
            if let Some(buf) = acc.buf(*a) {
                for ((row, gi), pi) in buf
                    .chunks_exact_mut(c)
                    .zip(g.chunks_exact(c))
                    .zip(out.chunks_exact(c))
                {
                    let dotp = kernels::dot(gi, pi);
                    for ((x, &gy), &p) in row.iter_mut().zip(gi).zip(pi) {
                        *x += p * (gy - dotp);
                    }
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            segments,
            probs,
        } => attention_backward(acc, &g, *q, *k, *v, *heads, segments, probs),
        Op::RmsNorm { x, gain, inv } => {
            let xv = acc.nodes[x.0].value.clone();
            let gv = acc.nodes[gain.0].value.clone();
            let d = gv.numel();
            let dt = T::from_usize(d).unwrap();
            if acc.nodes[x.0].requires_grad {
                let buf = acc.buf(*x).unwrap();
                let mut h = vec![T::zero(); d];
                for (((bi, gi), xi), &r) in buf
                    .chunks_exact_mut(d)
                    .zip(g.chunks_exact(d))
                    .zip(xv.data().chunks_exact(d))
                    .zip(inv)
                {
                    for ((hj, &gj), &wj) in h.iter_mut().zip(gi).zip(gv.data()) {
                        *hj = gj * wj;
                    }
                    // mean(h ⊙ u) with u = x·r
                    let hu = kernels::dot(&h, xi) * r / dt;
                    for ((b, &hj), &xj) in bi.iter_mut().zip(&h).zip(xi) {
                        *b += r * (hj - xj * r * hu);
                    }
                }
            }
            if acc.nodes[gain.0].requires_grad {
                let buf = acc.buf(*gain).unwrap();
                for ((gi, xi), &r) in g.chunks_exact(d).zip(xv.data().chunks_exact(d)).zip(inv) {
                    for ((b, &gj), &xj) in buf.iter_mut().zip(gi).zip(xi) {
                        *b += gj * xj * r;
                    }
                }
            }
        }
        Op::SelectRows { x, rows } => {
            let d = acc.nodes[x.0].value.shape()[1];
            if let Some(buf) = acc.buf(*x) {
                for (&r, gi) in rows.iter().zip(g.chunks_exact(d)) {
                    buf[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(gi)
                        .for_each(|(b, &y)| *b += y);
                }
            }
        }
        Op::Gather { x, idx } => {
            let d = acc.nodes[x.0].value.shape()[1];
            if let Some(buf) = acc.buf(*x) {
                for (&(r, c), &gy) in idx.iter().zip(&g) {
                    buf[r * d + c] += gy;
                }
            }
        }
        Op::SegmentMean { x, segments } => {
            if let Some(buf) = acc.buf(*x) {
                for (s, &gy) in segments.iter().zip(&g) {
                    let share = gy / T::from_usize(s.len).unwrap();
                    buf[s.start..s.start + s.len]
                        .iter_mut()
                        .for_each(|b| *b += share);
                }
            }
        }
        Op::WeightedRowSq { x, weights } => {
            let xv = acc.nodes[x.0].value.clone();
            let d = xv.shape()[1];
            let two = T::lit(2.0);
            if let Some(buf) = acc.buf(*x) {
                for ((bi, xi), &w) in buf
                    .chunks_exact_mut(d)
                    .zip(xv.data().chunks_exact(d))
                    .zip(weights)
                {
                    if w != T::zero() {
                        kernels::axpy(two * g[0] * w, xi, bi);
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Scalar>(
    acc: &mut Accum<'_, T>,
    g: &[T],
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    segments: &[Segment],
    probs: &[T],
) {
    let qv = acc.nodes[q.0].value.clone();
    let kv = acc.nodes[k.0].value.clone();
    let vv = acc.nodes[v.0].value.clone();
    let (n, d) = (qv.shape()[0], qv.shape()[1]);
    let dh = d / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut dq = vec![T::zero(); n * d];
    let mut dk = vec![T::zero(); n * d];
    let mut dv = vec![T::zero(); n * d];
    let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
    let mut off = 0;
    let mut ds = Vec::new();
    for seg in segments {
        let l = seg.len;
        for h in 0..heads {
            let col = h * dh;
            let p = &probs[off..off + l * l];
            let at = |row: usize| (seg.start + row) * d + col;
            for i in 0..l {
                let gi = &g[at(i)..at(i) + dh];
                ds.clear();
                let mut row_dot = T::zero();
                for j in 0..=i {
                    let pij = p[i * l + j];
                    let dp = kernels::dot(gi, &vd[at(j)..at(j) + dh]);
                    ds.push(dp);
                    row_dot += pij * dp;
                    kernels::axpy(pij, gi, &mut dv[at(j)..at(j) + dh]);
                }
                for j in 0..=i {
                    let s = p[i * l + j] * (ds[j] - row_dot) * scale;
                    if s != T::zero() {
                        kernels::axpy(s, &kd[at(j)..at(j) + dh], &mut dq[at(i)..at(i) + dh]);
                        kernels::axpy(s, &qd[at(i)..at(i) + dh], &mut dk[at(j)..at(j) + dh]);
                    }
                }
            }
            off += l * l;
        }
    }
    for (var, grad) in [(q, dq), (k, dk), (v, dv)] {
        if let Some(buf) = acc.buf(var) {
            buf.iter_mut().zip(&grad).for_each(|(b, &y)| *b += y);
        }
    }
}
