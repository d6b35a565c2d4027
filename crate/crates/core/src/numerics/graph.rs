//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with
//! whatever the backward pass needs (softmax outputs, normalization
//! statistics, dropout masks). [`Graph::backward`] walks the tape once in
//! reverse and yields gradients for every leaf created with
//! [`Graph::param`].

use std::sync::atomic::{AtomicU64, Ordering};

use super::real::{gemm, MatRef, Real};
use super::tensor::{moments, Tensor};
use super::NumericsError;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Geometry and masking of one fused multi-head attention call.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    /// Query `i` may only attend to keys `j <= i`.
    pub causal: bool,
    /// `batch * k_len` flags, `true` for padded key positions.
    pub key_padding: Vec<bool>,
}

enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add(usize, usize),
    AddRow { x: usize, bias: usize },
    Mul(usize, usize),
    Scale(usize, T),
    Transpose(usize),
    Reshape(usize),
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Softmax { a: usize, axis: usize },
    Relu(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<T>, rstd: Vec<T> },
    GatherRows { table: usize, ids: Vec<usize> },
    Attention { q: usize, k: usize, v: usize, spec: AttentionSpec, probs: Vec<T> },
    Dropout { a: usize, mask: Vec<T> },
    CrossEntropy { logits: usize, targets: Vec<u32>, smoothing: T, probs: Vec<T>, count: usize, exact: f64 },
    Sum(usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients<T: Real> {
    graph: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        if var.graph != self.graph {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }

    /// Gradient of `var`, zero-filled when the loss does not depend on it.
    pub fn take_or_zeros(&mut self, var: Var, shape: &[usize]) -> Tensor<T> {
        if var.graph == self.graph {
            if let Some(g) = self.grads.get_mut(var.index).and_then(Option::take) {
                return g;
            }
        }
        Tensor::zeros(shape)
    }
}

/// Recording of one forward computation.
pub struct Graph<T: Real = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
    consumed: bool,
    dropout_calls: u64,
    dropout_seed: u64,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self::with_dropout_seed(0)
    }

    /// Dropout masks are a pure function of this seed, the call ordinal and
    /// the element index.
    pub fn with_dropout_seed(seed: u64) -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
            dropout_calls: 0,
            dropout_seed: seed,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        assert_eq!(var.graph, self.id, "variable belongs to another graph");
        &self.nodes[var.index].value
    }

    /// Softmax weights `[batch, heads, q_len, k_len]` stored by an attention node.
    pub fn attention_weights(&self, var: Var) -> Option<(&AttentionSpec, &[T])> {
        if var.graph != self.id {
            return None;
        }
        match &self.nodes[var.index].op {
            Op::Attention { spec, probs, .. } => Some((spec, probs)),
            _ => None,
        }
    }

    /// Loss of a cross-entropy node before rounding to `T`.
    pub fn loss_f64(&self, var: Var) -> Option<f64> {
        if var.graph != self.id {
            return None;
        }
        match &self.nodes[var.index].op {
            Op::CrossEntropy { exact, .. } => Some(*exact),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var { graph: self.id, index: self.nodes.len() - 1 }
    }

    fn check(&self, var: Var) -> Result<usize, NumericsError> {
        if var.graph != self.id || var.index >= self.nodes.len() {
            return Err(NumericsError::ForeignVar);
        }
        Ok(var.index)
    }

    fn rg(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// `op(a) op(b)` where `op` optionally transposes a rank-2 operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, NumericsError> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.rank() != 2 || bv.rank() != 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let am = MatRef::dense(av.data(), av.shape()[0], av.shape()[1]);
        let bm = MatRef::dense(bv.data(), bv.shape()[0], bv.shape()[1]);
        let am = if ta { am.t() } else { am };
        let bm = if tb { bm.t() } else { bm };
        if am.cols != bm.rows {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); am.rows * bm.cols];
        gemm(am, bm, T::zero(), &mut out);
        let value = Tensor::new(vec![am.rows, bm.cols], out)?;
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(value, Op::MatMul { a: ai, b: bi, ta, tb }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_t(a, b, false, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let value = self.nodes[ai].value.add(&self.nodes[bi].value)?;
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(value, Op::Add(ai, bi), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let value = self.nodes[ai].value.mul(&self.nodes[bi].value)?;
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(value, Op::Mul(ai, bi), rg))
    }

    /// Adds a `[d]` bias to every row of a `[.., d]` tensor.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let (xi, bi) = (self.check(x)?, self.check(bias)?);
        let (xv, bv) = (&self.nodes[xi].value, &self.nodes[bi].value);
        let (_, cols) = xv.as_matrix_dims();
        if bv.numel() != cols {
            return Err(NumericsError::ShapeMismatch {
                op: "add_row",
                left: xv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(cols) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[xi, bi]);
        Ok(self.push(value, Op::AddRow { x: xi, bias: bi }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var, NumericsError> {
        let ai = self.check(a)?;
        let value = self.nodes[ai].value.scale(factor);
        let rg = self.rg(&[ai]);
        Ok(self.push(value, Op::Scale(ai, factor), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ai = self.check(a)?;
        let value = self.nodes[ai].value.transpose()?;
        let rg = self.rg(&[ai]);
        Ok(self.push(value, Op::Transpose(ai), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let ai = self.check(a)?;
        let value = self.nodes[ai].value.clone().reshape(shape)?;
        let rg = self.rg(&[ai]);
        Ok(self.push(value, Op::Reshape(ai), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, NumericsError> {
        let idx = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&Tensor<T>> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let value = Tensor::concat(&refs, axis)?;
        let rg = self.rg(&idx);
        Ok(self.push(value, Op::Concat { parts: idx, axis }, rg))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, NumericsError> {
        let ai = self.check(a)?;
        let value = self.nodes[ai].value.slice(axis, start, len)?;
        let rg = self.rg(&[ai]);
        Ok(self.push(value, Op::Slice { a: ai, axis, start }, rg))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, NumericsError> {
        let ai = self.check(a)?;
        let value = self.nodes[ai].value.softmax(axis)?;
        let rg = self.rg(&[ai]);
        Ok(self.push(value, Op::Softmax { a: ai, axis }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ai = self.check(a)?;
        let value = self.nodes[ai].value.map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(&[ai]);
        Ok(self.push(value, Op::Relu(ai), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ai = self.check(a)?;
        let s = self.nodes[ai].value.data().iter().copied().sum::<T>();
        let rg = self.rg(&[ai]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(ai), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var, NumericsError> {
        let (xi, gi, bi) = (self.check(x)?, self.check(gain)?, self.check(bias)?);
        let (xv, gv, bv) = (&self.nodes[xi].value, &self.nodes[gi].value, &self.nodes[bi].value);
        let (rows, cols) = xv.as_matrix_dims();
        if gv.numel() != cols || bv.numel() != cols {
            return Err(NumericsError::ShapeMismatch {
                op: "layer_norm",
                left: xv.shape().to_vec(),
                right: gv.shape().to_vec(),
            });
        }
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * cols..(r + 1) * cols];
            let (mean, rs) = moments(row, eps);
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[xi, gi, bi]);
        Ok(self.push(value, Op::LayerNorm { x: xi, gain: gi, bias: bi, xhat, rstd }, rg))
    }

    /// Rows of a `[n, d]` table selected by `ids` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let ti = self.check(table)?;
        let tv = &self.nodes[ti].value;
        if tv.rank() != 2 {
            return Err(NumericsError::RankMismatch { op: "gather_rows", expected: 2, shape: tv.shape().to_vec() });
        }
        let (n, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(NumericsError::OutOfRange { op: "gather_rows", index: id, bound: n });
            }
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(&[ti]);
        Ok(self.push(value, Op::GatherRows { table: ti, ids: ids.to_vec() }, rg))
    }

    /// Inverted dropout; the identity when `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var, NumericsError> {
        let ai = self.check(a)?;
        if rate <= 0.0 {
            return Ok(a);
        }
        self.dropout_calls += 1;
        let call = splitmix64(self.dropout_seed ^ splitmix64(self.dropout_calls));
        let keep_scale = T::from_f64(1.0 / (1.0 - rate));
        let threshold = (rate * (1u64 << 53) as f64) as u64;
        let av = &self.nodes[ai].value;
        let mask: Vec<T> = (0..av.numel())
            .map(|i| {
                let r = splitmix64(call.wrapping_add(i as u64)) >> 11;
                if r < threshold {
                    T::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let data = av.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[ai]);
        Ok(self.push(value, Op::Dropout { a: ai, mask }, rg))
    }

    /// Fused scaled dot-product attention over `heads` interleaved head slices.
    ///
    /// `q` is `[batch * q_len, d]`, `k` and `v` are `[batch * k_len, d]`.
    /// Masked positions receive exactly zero weight.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var, NumericsError> {
        let (qi, ki, vi) = (self.check(q)?, self.check(k)?, self.check(v)?);
        let (qv, kv, vv) = (&self.nodes[qi].value, &self.nodes[ki].value, &self.nodes[vi].value);
        let (qr, d) = qv.as_matrix_dims();
        let (kr, dk) = kv.as_matrix_dims();
        let (vr, dv) = vv.as_matrix_dims();
        let AttentionSpec { batch, q_len, k_len, heads, causal, .. } = spec;
        if qr != batch * q_len || kr != batch * k_len || vr != kr || dk != d || dv != d || d % heads != 0 {
            return Err(NumericsError::ShapeMismatch {
                op: "attention",
                left: qv.shape().to_vec(),
                right: kv.shape().to_vec(),
            });
        }
        if spec.key_padding.len() != batch * k_len || (causal && q_len > k_len) {
            return Err(NumericsError::ShapeMismatch {
                op: "attention mask",
                left: vec![batch, k_len],
                right: vec![spec.key_padding.len()],
            });
        }
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut probs = vec![T::zero(); batch * heads * q_len * k_len];
        let mut out = vec![T::zero(); qr * d];
        let mut scores = vec![T::zero(); k_len];
        for b in 0..batch {
            let pad = &spec.key_padding[b * k_len..(b + 1) * k_len];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..q_len {
                    let qrow = &qd[(b * q_len + i) * d + off..][..dh];
                    let mut max = T::neg_infinity();
                    for j in 0..k_len {
                        if pad[j] || (causal && j > i) {
                            scores[j] = T::neg_infinity();
                            continue;
                        }
                        let krow = &kd[(b * k_len + j) * d + off..][..dh];
                        let s = dot(qrow, krow) * scale;
                        scores[j] = s;
                        if s > max {
                            max = s;
                        }
                    }
                    let prow = &mut probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                    if max == T::neg_infinity() {
                        continue;
                    }
                    let mut total = T::zero();
                    for j in 0..k_len {
                        if scores[j] != T::neg_infinity() {
                            let e = (scores[j] - max).exp();
                            prow[j] = e;
                            total += e;
                        }
                    }
                    let orow = &mut out[(b * q_len + i) * d + off..][..dh];
                    for j in 0..k_len {
                        if prow[j] == T::zero() {
                            continue;
                        }
                        prow[j] /= total;
                        let p = prow[j];
                        let vrow = &vd[(b * k_len + j) * d + off..][..dh];
                        for c in 0..dh {
                            orow[c] += p * vrow[c];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![qr, d], out)?;
        let rg = self.rg(&[qi, ki, vi]);
        Ok(self.push(value, Op::Attention { q: qi, k: ki, v: vi, spec, probs }, rg))
    }

    /// Mean label-smoothed negative log-likelihood over rows whose target is
    /// not `ignore`. Smoothing mass is spread uniformly over all classes.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u32],
        smoothing: f64,
        ignore: Option<u32>,
    ) -> Result<Var, NumericsError> {
        let li = self.check(logits)?;
        let lv = &self.nodes[li].value;
        let (rows, classes) = lv.as_matrix_dims();
        if targets.len() != rows {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(NumericsError::InvalidArgument(format!("label smoothing {smoothing} outside [0, 1)")));
        }
        let mut probs = vec![T::zero(); rows * classes];
        let mut total = 0.0f64;
        let mut count = 0usize;
        for r in 0..rows {
            let t = targets[r];
            if Some(t) == ignore {
                continue;
            }
            if t as usize >= classes {
                return Err(NumericsError::OutOfRange { op: "cross_entropy", index: t as usize, bound: classes });
            }
            let z = &lv.data()[r * classes..(r + 1) * classes];
            let max = z.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = 0.0f64;
            let prow = &mut probs[r * classes..(r + 1) * classes];
            for (p, &x) in prow.iter_mut().zip(z) {
                let e = (x - max).as_f64().exp();
                *p = T::from_f64(e);
                sum += e;
            }
            for p in prow.iter_mut() {
                *p = T::from_f64(p.as_f64() / sum);
            }
            let lse = max.as_f64() + sum.ln();
            let nll = lse - z[t as usize].as_f64();
            let mean_z = z.iter().map(|x| x.as_f64()).sum::<f64>() / classes as f64;
            total += (1.0 - smoothing) * nll + smoothing * (lse - mean_z);
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.rg(&[li]);
        let op = Op::CrossEntropy {
            logits: li,
            targets: targets.to_vec(),
            smoothing: T::from_f64(smoothing),
            probs,
            count,
            exact: loss,
        };
        Ok(self.push(Tensor::scalar(T::from_f64(loss)), op, rg))
    }

    /// Reverse pass from a scalar. The tape can be differentiated only once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        let li = self.check(loss)?;
        if self.consumed {
            return Err(NumericsError::GraphConsumed);
        }
        if self.nodes[li].value.numel() != 1 {
            return Err(NumericsError::NonScalarLoss { shape: self.nodes[li].value.shape().to_vec() });
        }
        if !self.nodes[li].requires_grad {
            return Err(NumericsError::Detached);
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[li] = Some(vec![T::one()]);
        for i in (0..=li).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) if node.requires_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { graph: self.id, grads })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].requires_grad;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let am = MatRef::dense(av.data(), av.shape()[0], av.shape()[1]);
                let bm = MatRef::dense(bv.data(), bv.shape()[0], bv.shape()[1]);
                let op_a = if *ta { am.t() } else { am };
                let op_b = if *tb { bm.t() } else { bm };
                let gm = MatRef::dense(g, op_a.rows, op_b.cols);
                if wants(*a) {
                    let da = slot(grads, nodes, *a);
                    if *ta {
                        gemm(op_b, gm.t(), T::one(), da);
                    } else {
                        gemm(gm, op_b.t(), T::one(), da);
                    }
                }
                if wants(*b) {
                    let db = slot(grads, nodes, *b);
                    if *tb {
                        gemm(gm.t(), op_a, T::one(), db);
                    } else {
                        gemm(op_a.t(), gm, T::one(), db);
                    }
                }
            }
            Op::Add(a, b) => {
                for &j in [a, b] {
                    if wants(j) {
                        let d = slot(grads, nodes, j);
                        add_into(d, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                if wants(*a) {
                    let d = slot(grads, nodes, *a);
                    for ((o, &gg), &y) in d.iter_mut().zip(g).zip(bv) {
                        *o += gg * y;
                    }
                }
                if wants(*b) {
                    let d = slot(grads, nodes, *b);
                    for ((o, &gg), &x) in d.iter_mut().zip(g).zip(av) {
                        *o += gg * x;
                    }
                }
            }
            Op::AddRow { x, bias } => {
                if wants(*x) {
                    let d = slot(grads, nodes, *x);
                    add_into(d, g);
                }
                if wants(*bias) {
                    let d = slot(grads, nodes, *bias);
                    let cols = d.len();
                    for row in g.chunks(cols) {
                        add_into(d, row);
                    }
                }
            }
            Op::Scale(a, f) => {
                if wants(*a) {
                    let d = slot(grads, nodes, *a);
                    for (o, &gg) in d.iter_mut().zip(g) {
                        *o += gg * *f;
                    }
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    let (m, n) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
                    let d = slot(grads, nodes, *a);
                    for r in 0..m {
                        for c in 0..n {
                            d[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if wants(*a) {
                    let d = slot(grads, nodes, *a);
                    add_into(d, g);
                }
            }
            Op::Concat { parts, axis } => {
                let shape = nodes[i].value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let full = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = nodes[p].value.shape()[*axis] * inner;
                    if wants(p) {
                        let d = slot(grads, nodes, p);
                        for o in 0..outer {
                            add_into(&mut d[o * chunk..(o + 1) * chunk], &g[o * full + offset..][..chunk]);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Slice { a, axis, start } => {
                if wants(*a) {
                    let src = nodes[*a].value.shape();
                    let outer: usize = src[..*axis].iter().product();
                    let inner: usize = src[axis + 1..].iter().product();
                    let full = src[*axis] * inner;
                    let chunk = nodes[i].value.shape()[*axis] * inner;
                    let d = slot(grads, nodes, *a);
                    for o in 0..outer {
                        add_into(&mut d[o * full + start * inner..][..chunk], &g[o * chunk..(o + 1) * chunk]);
                    }
                }
            }
            Op::Softmax { a, axis } => {
                if wants(*a) {
                    let y = &nodes[i].value;
                    let shape = y.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let n = shape[*axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let d = slot(grads, nodes, *a);
                    for o in 0..outer {
                        for c in 0..inner {
                            let idx = |j: usize| o * n * inner + j * inner + c;
                            let dotp: T = (0..n).map(|j| g[idx(j)] * y.data()[idx(j)]).sum();
                            for j in 0..n {
                                d[idx(j)] += y.data()[idx(j)] * (g[idx(j)] - dotp);
                            }
                        }
                    }
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let x = nodes[*a].value.data();
                    let d = slot(grads, nodes, *a);
                    for ((o, &gg), &xv) in d.iter_mut().zip(g).zip(x) {
                        if xv > T::zero() {
                            *o += gg;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    let d = slot(grads, nodes, *a);
                    for o in d.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let cols = nodes[*gain].value.numel();
                let gv = nodes[*gain].value.data();
                if wants(*gain) {
                    let d = slot(grads, nodes, *gain);
                    for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            d[c] += grow[c] * hrow[c];
                        }
                    }
                }
                if wants(*bias) {
                    let d = slot(grads, nodes, *bias);
                    for grow in g.chunks(cols) {
                        add_into(d, grow);
                    }
                }
                if wants(*x) {
                    let d = slot(grads, nodes, *x);
                    let n = T::from_f64(cols as f64);
                    let mut dh = vec![T::zero(); cols];
                    for (r, (grow, hrow)) in g.chunks(cols).zip(xhat.chunks(cols)).enumerate() {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for c in 0..cols {
                            dh[c] = grow[c] * gv[c];
                            mean_dh += dh[c];
                            mean_dh_h += dh[c] * hrow[c];
                        }
                        mean_dh /= n;
                        mean_dh_h /= n;
                        let out = &mut d[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            out[c] += rstd[r] * (dh[c] - mean_dh - hrow[c] * mean_dh_h);
                        }
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                if wants(*table) {
                    let dcols = nodes[*table].value.shape()[1];
                    let d = slot(grads, nodes, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut d[id * dcols..(id + 1) * dcols], &g[r * dcols..(r + 1) * dcols]);
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if wants(*a) {
                    let d = slot(grads, nodes, *a);
                    for ((o, &gg), &m) in d.iter_mut().zip(g).zip(mask) {
                        *o += gg * m;
                    }
                }
            }
            Op::Attention { q, k, v, spec, probs } => {
                self.attention_backward(g, *q, *k, *v, spec, probs, grads);
            }
            Op::CrossEntropy { logits, targets, smoothing, probs, count, .. } => {
                if wants(*logits) && *count > 0 {
                    let classes = nodes[*logits].value.shape().last().copied().unwrap_or(1);
                    let d = slot(grads, nodes, *logits);
                    let scale = g[0] / T::from_f64(*count as f64);
                    let uniform = *smoothing / T::from_f64(classes as f64);
                    let hit = T::one() - *smoothing;
                    for (r, &t) in targets.iter().enumerate() {
                        let p = &probs[r * classes..(r + 1) * classes];
                        if p.iter().all(|&x| x == T::zero()) {
                            continue;
                        }
                        let out = &mut d[r * classes..(r + 1) * classes];
                        for c in 0..classes {
                            let target = if c == t as usize { hit + uniform } else { uniform };
                            out[c] += (p[c] - target) * scale;
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        qi: usize,
        ki: usize,
        vi: usize,
        spec: &AttentionSpec,
        probs: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let nodes = &self.nodes;
        let (q_len, k_len, heads) = (spec.q_len, spec.k_len, spec.heads);
        let d = nodes[qi].value.shape()[1];
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (nodes[qi].value.data(), nodes[ki].value.data(), nodes[vi].value.data());
        let (wq, wk, wv) = (nodes[qi].requires_grad, nodes[ki].requires_grad, nodes[vi].requires_grad);
        let mut dq = if wq { vec![T::zero(); qd.len()] } else { Vec::new() };
        let mut dk = if wk { vec![T::zero(); kd.len()] } else { Vec::new() };
        let mut dv = if wv { vec![T::zero(); vd.len()] } else { Vec::new() };
        let mut ds = vec![T::zero(); k_len];
        for b in 0..spec.batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..q_len {
                    let prow = &probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                    let grow = &g[(b * q_len + i) * d + off..][..dh];
                    let mut weighted = T::zero();
                    for j in 0..k_len {
                        if prow[j] == T::zero() {
                            ds[j] = T::zero();
                            continue;
                        }
                        let vrow = &vd[(b * k_len + j) * d + off..][..dh];
                        let dp = dot(grow, vrow);
                        ds[j] = dp;
                        weighted += dp * prow[j];
                        if wv {
                            let dvrow = &mut dv[(b * k_len + j) * d + off..][..dh];
                            for c in 0..dh {
                                dvrow[c] += prow[j] * grow[c];
                            }
                        }
                    }
                    let qrow_off = (b * q_len + i) * d + off;
                    for j in 0..k_len {
                        if prow[j] == T::zero() {
                            continue;
                        }
                        let s = prow[j] * (ds[j] - weighted) * scale;
                        let krow_off = (b * k_len + j) * d + off;
                        if wq {
                            for c in 0..dh {
                                dq[qrow_off + c] += s * kd[krow_off + c];
                            }
                        }
                        if wk {
                            for c in 0..dh {
                                dk[krow_off + c] += s * qd[qrow_off + c];
                            }
                        }
                    }
                }
            }
        }
        for (j, buf) in [(qi, dq), (ki, dk), (vi, dv)] {
            if buf.is_empty() {
                continue;
            }
            match &mut grads[j] {
                Some(existing) => add_into(existing, &buf),
                slot @ None => *slot = Some(buf),
            }
        }
    }
}

fn slot<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], j: usize) -> &'a mut Vec<T> {
    let len = nodes[j].value.numel();
    grads[j].get_or_insert_with(|| vec![T::zero(); len])
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
