//! Reverse-mode autodiff tape.
//!
//! Ops evaluate eagerly when a node is created; `backward` replays the tape
//! in reverse and accumulates gradients. Fused ops (windowed attention,
//! layer norm, cross entropy) cache what their backward pass needs at
//! creation time, so a forward-only pass is just "never call backward".

use std::collections::BTreeMap;
use std::sync::Arc;

use super::params::ParamSet;
use super::tensor::{matmul_nn_acc, matmul_nt_acc, matmul_tn_acc, Scalar, Tensor};
use super::NnError;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<T> {
    Constant,
    Param,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    /// Row-broadcast bias add: a[m,n] + b[n].
    AddRow(NodeId, NodeId),
    MatMulNN(NodeId, NodeId),
    /// a[m,k] · b[n,k]ᵀ.
    MatMulNT(NodeId, NodeId),
    Abs(NodeId),
    Sum(NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    SoftmaxRows(NodeId),
    CrossEntropyRows {
        logits: NodeId,
        targets: Arc<Vec<usize>>,
        probs: Tensor<T>,
    },
    GatherRows {
        x: NodeId,
        idx: Arc<Vec<usize>>,
    },
    GatherElems {
        x: NodeId,
        idx: Arc<Vec<usize>>,
    },
    /// Masked rows of x replaced by the broadcast replacement row.
    RowBlend {
        x: NodeId,
        repl: NodeId,
        mask: Arc<Vec<bool>>,
    },
    ConcatCols(NodeId, NodeId),
    MeanPoolGroups {
        x: NodeId,
        group: usize,
    },
    L2NormalizeRows {
        x: NodeId,
        norms: Vec<T>,
    },
    WindowAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        bias: NodeId,
        heads: usize,
        win_tokens: usize,
        scale: T,
        probs: Tensor<T>,
    },
    Reshape(NodeId),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// One computation, built op by op, then differentiated once.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

/// Parameter name → node id mapping for one graph.
pub struct ParamBinding {
    ids: BTreeMap<String, NodeId>,
}

impl ParamBinding {
    pub fn id(&self, name: &str) -> Result<NodeId, NnError> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| NnError::Config(format!("parameter {name:?} not bound in graph")))
    }

    /// Gradients for every bound parameter, zeros where backward never
    /// reached the leaf.
    pub fn grads<T: Scalar>(&self, g: &Graph<T>) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (name, &id) in &self.ids {
            let grad = match g.grad(id) {
                Some(t) => t.clone(),
                None => Tensor::zeros(g.value(id).shape()),
            };
            out.insert(name, grad).expect("binding names are unique");
        }
        out
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── Leaves ─────────────────────────────────────────────────────────

    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Constant, false)
    }

    /// A gradient-carrying leaf; named leaves come from [`Graph::bind`].
    pub fn param(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Param, true)
    }

    /// Binds every tensor of a parameter set as a gradient-carrying leaf.
    pub fn bind(&mut self, params: &ParamSet<T>) -> ParamBinding {
        let mut ids = BTreeMap::new();
        for (name, t) in params.iter() {
            let id = self.param(t.clone());
            ids.insert(name.to_string(), id);
        }
        ParamBinding { ids }
    }

    // ── Elementwise and linear ops ─────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(NnError::Shape(format!(
                "add: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut out = va.clone();
        for (o, &x) in out.data_mut().iter_mut().zip(vb.data()) {
            *o += x;
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(NnError::Shape(format!(
                "sub: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut out = va.clone();
        for (o, &x) in out.data_mut().iter_mut().zip(vb.data()) {
            *o -= x;
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(NnError::Shape(format!(
                "mul: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut out = va.clone();
        for (o, &x) in out.data_mut().iter_mut().zip(vb.data()) {
            *o *= x;
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let out = self.value(a).map(|v| v * c);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// a[m,n] + bias[n], broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, NnError> {
        let (m, n) = self.value(a).dims2()?;
        let vb = self.value(bias);
        if vb.len() != n {
            return Err(NnError::Shape(format!(
                "add_row: matrix [{m},{n}] vs bias len {}",
                vb.len()
            )));
        }
        let mut out = self.value(a).clone();
        {
            let bd: Vec<T> = vb.data().to_vec();
            let od = out.data_mut();
            for i in 0..m {
                for j in 0..n {
                    od[i * n + j] += bd[j];
                }
            }
        }
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(out, Op::AddRow(a, bias), ng))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (m, ka) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if ka != kb {
            return Err(NnError::Shape(format!(
                "matmul: [{m},{ka}] · [{kb},{n}]"
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        matmul_nn_acc(
            self.value(a).data(),
            self.value(b).data(),
            m,
            ka,
            n,
            out.data_mut(),
        );
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMulNN(a, b), ng))
    }

    /// a[m,k] · b[n,k]ᵀ → [m,n].
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (m, ka) = self.value(a).dims2()?;
        let (n, kb) = self.value(b).dims2()?;
        if ka != kb {
            return Err(NnError::Shape(format!(
                "matmul_nt: [{m},{ka}] · [{n},{kb}]ᵀ"
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        matmul_nt_acc(
            self.value(a).data(),
            self.value(b).data(),
            m,
            ka,
            n,
            out.data_mut(),
        );
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMulNT(a, b), ng))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|v| v.abs());
        let ng = self.needs(a);
        self.push(out, Op::Abs(a), ng)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: T = self.value(a).data().iter().copied().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(gelu_fwd);
        let ng = self.needs(a);
        self.push(out, Op::Gelu(a), ng)
    }

    // ── Normalization ──────────────────────────────────────────────────

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
    ) -> Result<NodeId, NnError> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(NnError::Shape(format!(
                "layer_norm: width {n} vs gamma {} / beta {}",
                self.value(gamma).len(),
                self.value(beta).len()
            )));
        }
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let inv_n = T::ONE / T::from_f64(n as f64);
        let mut xhat = Tensor::zeros(&[m, n]);
        let mut inv_std = vec![T::ZERO; m];
        let mut out = Tensor::zeros(&[m, n]);
        {
            let xh = xhat.data_mut();
            let od = out.data_mut();
            for i in 0..m {
                let row = &xd[i * n..(i + 1) * n];
                let mean: T = row.iter().copied().sum::<T>() * inv_n;
                let mut var = T::ZERO;
                for &v in row {
                    let d = v - mean;
                    var += d * d;
                }
                var *= inv_n;
                let istd = T::ONE / (var + eps).sqrt();
                inv_std[i] = istd;
                for j in 0..n {
                    let h = (row[j] - mean) * istd;
                    xh[i * n + j] = h;
                    od[i * n + j] = gd[j] * h + bd[j];
                }
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let (m, n) = self.value(x).dims2()?;
        let xd = self.value(x).data();
        let mut out = Tensor::zeros(&[m, n]);
        {
            let od = out.data_mut();
            for i in 0..m {
                softmax_row(&xd[i * n..(i + 1) * n], &mut od[i * n..(i + 1) * n]);
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::SoftmaxRows(x), ng))
    }

    /// Mean over rows of softmax cross entropy against integer targets.
    pub fn cross_entropy_rows(
        &mut self,
        logits: NodeId,
        targets: Arc<Vec<usize>>,
    ) -> Result<NodeId, NnError> {
        let (m, n) = self.value(logits).dims2()?;
        if targets.len() != m {
            return Err(NnError::Shape(format!(
                "cross_entropy: {m} rows vs {} targets",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= n) {
            return Err(NnError::Shape(format!(
                "cross_entropy: target {t} out of range for {n} classes"
            )));
        }
        let xd = self.value(logits).data();
        let mut probs = Tensor::zeros(&[m, n]);
        let mut total = T::ZERO;
        {
            let pd = probs.data_mut();
            for i in 0..m {
                let row = &xd[i * n..(i + 1) * n];
                let lse = softmax_row(row, &mut pd[i * n..(i + 1) * n]);
                total += lse - row[targets[i]];
            }
        }
        let value = total / T::from_f64(m as f64);
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropyRows {
                logits,
                targets,
                probs,
            },
            ng,
        ))
    }

    // ── Data movement ──────────────────────────────────────────────────

    pub fn gather_rows(&mut self, x: NodeId, idx: Arc<Vec<usize>>) -> Result<NodeId, NnError> {
        let (m, n) = self.value(x).dims2()?;
        if let Some(&i) = idx.iter().find(|&&i| i >= m) {
            return Err(NnError::Shape(format!(
                "gather_rows: index {i} out of range for {m} rows"
            )));
        }
        let xd = self.value(x).data();
        let mut out = Tensor::zeros(&[idx.len(), n]);
        {
            let od = out.data_mut();
            for (r, &src) in idx.iter().enumerate() {
                od[r * n..(r + 1) * n].copy_from_slice(&xd[src * n..(src + 1) * n]);
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::GatherRows { x, idx }, ng))
    }

    /// Flat-index gather, e.g. building a relative-bias matrix from a table.
    pub fn gather_elems(
        &mut self,
        x: NodeId,
        idx: Arc<Vec<usize>>,
        out_shape: &[usize],
    ) -> Result<NodeId, NnError> {
        let len = self.value(x).len();
        if let Some(&i) = idx.iter().find(|&&i| i >= len) {
            return Err(NnError::Shape(format!(
                "gather_elems: index {i} out of range for {len} elements"
            )));
        }
        if out_shape.iter().product::<usize>() != idx.len() {
            return Err(NnError::Shape(format!(
                "gather_elems: shape {:?} vs {} indices",
                out_shape,
                idx.len()
            )));
        }
        let xd = self.value(x).data();
        let data: Vec<T> = idx.iter().map(|&i| xd[i]).collect();
        let out = Tensor::from_vec(out_shape, data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::GatherElems { x, idx }, ng))
    }

    /// Replaces masked rows of x[m,n] with a single replacement row.
    pub fn row_blend(
        &mut self,
        x: NodeId,
        repl: NodeId,
        mask: Arc<Vec<bool>>,
    ) -> Result<NodeId, NnError> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(repl).len() != n {
            return Err(NnError::Shape(format!(
                "row_blend: width {n} vs replacement len {}",
                self.value(repl).len()
            )));
        }
        if mask.len() != m {
            return Err(NnError::Shape(format!(
                "row_blend: {m} rows vs mask len {}",
                mask.len()
            )));
        }
        let mut out = self.value(x).clone();
        {
            let rd: Vec<T> = self.value(repl).data().to_vec();
            let od = out.data_mut();
            for (i, &masked) in mask.iter().enumerate() {
                if masked {
                    od[i * n..(i + 1) * n].copy_from_slice(&rd);
                }
            }
        }
        let ng = self.needs(x) || self.needs(repl);
        Ok(self.push(out, Op::RowBlend { x, repl, mask }, ng))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (ma, na) = self.value(a).dims2()?;
        let (mb, nb) = self.value(b).dims2()?;
        if ma != mb {
            return Err(NnError::Shape(format!(
                "concat_cols: {ma} rows vs {mb} rows"
            )));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = Tensor::zeros(&[ma, na + nb]);
        {
            let od = out.data_mut();
            for i in 0..ma {
                od[i * (na + nb)..i * (na + nb) + na]
                    .copy_from_slice(&ad[i * na..(i + 1) * na]);
                od[i * (na + nb) + na..(i + 1) * (na + nb)]
                    .copy_from_slice(&bd[i * nb..(i + 1) * nb]);
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::ConcatCols(a, b), ng))
    }

    /// Mean over consecutive row groups: [g·k, n] → [g, n].
    pub fn mean_pool_groups(&mut self, x: NodeId, group: usize) -> Result<NodeId, NnError> {
        let (m, n) = self.value(x).dims2()?;
        if group == 0 || m % group != 0 {
            return Err(NnError::Shape(format!(
                "mean_pool_groups: {m} rows not divisible into groups of {group}"
            )));
        }
        let g = m / group;
        let xd = self.value(x).data();
        let inv = T::ONE / T::from_f64(group as f64);
        let mut out = Tensor::zeros(&[g, n]);
        {
            let od = out.data_mut();
            for gi in 0..g {
                let orow = &mut od[gi * n..(gi + 1) * n];
                for r in 0..group {
                    let row = &xd[(gi * group + r) * n..(gi * group + r + 1) * n];
                    for j in 0..n {
                        orow[j] += row[j];
                    }
                }
                for v in orow.iter_mut() {
                    *v *= inv;
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::MeanPoolGroups { x, group }, ng))
    }

    /// Row-wise L2 normalization; exactly-zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let (m, n) = self.value(x).dims2()?;
        let xd = self.value(x).data();
        let mut norms = vec![T::ZERO; m];
        let mut out = Tensor::zeros(&[m, n]);
        {
            let od = out.data_mut();
            for i in 0..m {
                let row = &xd[i * n..(i + 1) * n];
                let mut sq = T::ZERO;
                for &v in row {
                    sq += v * v;
                }
                let norm = sq.sqrt();
                norms[i] = norm;
                if norm.to_f64() > 0.0 {
                    for j in 0..n {
                        od[i * n + j] = row[j] / norm;
                    }
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::L2NormalizeRows { x, norms }, ng))
    }

    /// Multi-head self-attention inside fixed-size windows.
    ///
    /// q, k, v: [n_windows · win_tokens, heads · head_dim], rows already in
    /// window-major order. bias: [heads, win_tokens · win_tokens], shared
    /// across windows. Output has the q/k/v layout.
    pub fn window_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        bias: NodeId,
        heads: usize,
        win_tokens: usize,
    ) -> Result<NodeId, NnError> {
        let (rows, dim) = self.value(q).dims2()?;
        if self.value(k).shape() != self.value(q).shape()
            || self.value(v).shape() != self.value(q).shape()
        {
            return Err(NnError::Shape(
                "window_attention: q/k/v shapes differ".to_string(),
            ));
        }
        if heads == 0 || dim % heads != 0 {
            return Err(NnError::Shape(format!(
                "window_attention: dim {dim} not divisible by {heads} heads"
            )));
        }
        if win_tokens == 0 || rows % win_tokens != 0 {
            return Err(NnError::Shape(format!(
                "window_attention: {rows} rows not divisible into windows of {win_tokens}"
            )));
        }
        let wt2 = win_tokens * win_tokens;
        if self.value(bias).shape() != [heads, wt2] {
            return Err(NnError::Shape(format!(
                "window_attention: bias shape {:?}, expected [{heads}, {wt2}]",
                self.value(bias).shape()
            )));
        }
        let n_windows = rows / win_tokens;
        let dh = dim / heads;
        let scale = T::ONE / T::from_f64((dh as f64).sqrt());

        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let bd = self.value(bias).data();

        let mut out = Tensor::zeros(&[rows, dim]);
        let mut probs = Tensor::zeros(&[n_windows * heads, wt2]);
        {
            let od = out.data_mut();
            let pd = probs.data_mut();
            let mut qb = vec![T::ZERO; win_tokens * dh];
            let mut kb = vec![T::ZERO; win_tokens * dh];
            let mut vb = vec![T::ZERO; win_tokens * dh];
            let mut scores = vec![T::ZERO; wt2];
            let mut ctx = vec![T::ZERO; win_tokens * dh];
            for u in 0..n_windows {
                for h in 0..heads {
                    copy_block(qd, dim, u * win_tokens, win_tokens, h * dh, dh, &mut qb);
                    copy_block(kd, dim, u * win_tokens, win_tokens, h * dh, dh, &mut kb);
                    copy_block(vd, dim, u * win_tokens, win_tokens, h * dh, dh, &mut vb);
                    scores.iter_mut().for_each(|s| *s = T::ZERO);
                    matmul_nt_acc(&qb, &kb, win_tokens, dh, win_tokens, &mut scores);
                    let brow = &bd[h * wt2..(h + 1) * wt2];
                    for (s, &b) in scores.iter_mut().zip(brow) {
                        *s = *s * scale + b;
                    }
                    let prow = &mut pd[(u * heads + h) * wt2..(u * heads + h + 1) * wt2];
                    for t in 0..win_tokens {
                        softmax_row(
                            &scores[t * win_tokens..(t + 1) * win_tokens],
                            &mut prow[t * win_tokens..(t + 1) * win_tokens],
                        );
                    }
                    ctx.iter_mut().for_each(|c| *c = T::ZERO);
                    matmul_nn_acc(prow, &vb, win_tokens, win_tokens, dh, &mut ctx);
                    add_block(od, dim, u * win_tokens, win_tokens, h * dh, dh, &ctx);
                }
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v) || self.needs(bias);
        Ok(self.push(
            out,
            Op::WindowAttention {
                q,
                k,
                v,
                bias,
                heads,
                win_tokens,
                scale,
                probs,
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, NnError> {
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.len() {
            return Err(NnError::Shape(format!(
                "reshape: {:?} to {:?}",
                v.shape(),
                shape
            )));
        }
        let out = Tensor::from_vec(shape, v.data().to_vec())?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    // ── Backward ───────────────────────────────────────────────────────

    /// Accumulates gradients of a single-element loss node into every
    /// gradient-carrying ancestor. One call per graph.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), NnError> {
        if self.value(loss).len() != 1 {
            return Err(NnError::Shape(format!(
                "backward: loss has shape {:?}, expected a scalar",
                self.value(loss).shape()
            )));
        }
        if !self.grads.is_empty() {
            return Err(NnError::Config(
                "backward called twice on one graph".to_string(),
            ));
        }
        if !self.value(loss).all_finite() {
            return Err(NnError::NonFinite("loss value".to_string()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::from_vec(self.value(loss).shape(), vec![T::ONE])?);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn grad_slot(&mut self, id: NodeId) -> &mut [T] {
        if self.grads[id.0].is_none() {
            let shape = self.nodes[id.0].value.shape().to_vec();
            self.grads[id.0] = Some(Tensor::zeros(&shape));
        }
        self.grads[id.0].as_mut().unwrap().data_mut()
    }

    fn propagate(&mut self, i: usize, g: &Tensor<T>) -> Result<(), NnError> {
        // Ops are cheap to match on; values are borrowed per-arm to keep
        // mutable access to the grad slots legal.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Constant);
        match &op {
            Op::Constant | Op::Param => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(self.grad_slot(*a), g.data(), T::ONE);
                }
                if self.needs(*b) {
                    accumulate(self.grad_slot(*b), g.data(), T::ONE);
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(self.grad_slot(*a), g.data(), T::ONE);
                }
                if self.needs(*b) {
                    accumulate(self.grad_slot(*b), g.data(), -T::ONE);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let vb = self.nodes[b.0].value.data().to_vec();
                    let ga = self.grad_slot(*a);
                    for ((o, &gv), &bv) in ga.iter_mut().zip(g.data()).zip(&vb) {
                        *o += gv * bv;
                    }
                }
                if self.needs(*b) {
                    let va = self.nodes[a.0].value.data().to_vec();
                    let gb = self.grad_slot(*b);
                    for ((o, &gv), &av) in gb.iter_mut().zip(g.data()).zip(&va) {
                        *o += gv * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    accumulate(self.grad_slot(*a), g.data(), *c);
                }
            }
            Op::AddRow(a, bias) => {
                let (m, n) = self.nodes[a.0].value.dims2()?;
                if self.needs(*a) {
                    accumulate(self.grad_slot(*a), g.data(), T::ONE);
                }
                if self.needs(*bias) {
                    let gb = self.grad_slot(*bias);
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += g.data()[i * n + j];
                        }
                    }
                }
            }
            Op::MatMulNN(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2()?;
                let (_, n) = self.nodes[b.0].value.dims2()?;
                if self.needs(*a) {
                    let vb = self.nodes[b.0].value.data().to_vec();
                    matmul_nt_acc(g.data(), &vb, m, n, k, self.grad_slot(*a));
                }
                if self.needs(*b) {
                    let va = self.nodes[a.0].value.data().to_vec();
                    matmul_tn_acc(&va, g.data(), m, k, n, self.grad_slot(*b));
                }
            }
            Op::MatMulNT(a, b) => {
                // out = a·bᵀ: da += g·b, db += gᵀ·a.
                let (m, k) = self.nodes[a.0].value.dims2()?;
                let (n, _) = self.nodes[b.0].value.dims2()?;
                if self.needs(*a) {
                    let vb = self.nodes[b.0].value.data().to_vec();
                    matmul_nn_acc(g.data(), &vb, m, n, k, self.grad_slot(*a));
                }
                if self.needs(*b) {
                    let va = self.nodes[a.0].value.data().to_vec();
                    matmul_tn_acc(g.data(), &va, m, n, k, self.grad_slot(*b));
                }
            }
            Op::Abs(a) => {
                if self.needs(*a) {
                    let va = self.nodes[a.0].value.data().to_vec();
                    let ga = self.grad_slot(*a);
                    for ((o, &gv), &x) in ga.iter_mut().zip(g.data()).zip(&va) {
                        // Subgradient at 0 is taken as 0.
                        if x > T::ZERO {
                            *o += gv;
                        } else if x < T::ZERO {
                            *o -= gv;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if self.needs(*a) {
                    let gv = g.data()[0];
                    for o in self.grad_slot(*a) {
                        *o += gv;
                    }
                }
            }
            Op::Gelu(a) => {
                if self.needs(*a) {
                    let va = self.nodes[a.0].value.data().to_vec();
                    let ga = self.grad_slot(*a);
                    for ((o, &gv), &x) in ga.iter_mut().zip(g.data()).zip(&va) {
                        *o += gv * gelu_bwd(x);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (m, n) = xhat.dims2()?;
                let vgamma = self.nodes[gamma.0].value.data().to_vec();
                let inv_n = T::ONE / T::from_f64(n as f64);
                if self.needs(*x) {
                    let gx = self.grad_slot(*x);
                    for i in 0..m {
                        let grow = &g.data()[i * n..(i + 1) * n];
                        let hrow = &xhat.data()[i * n..(i + 1) * n];
                        let mut m1 = T::ZERO; // mean(gamma·dy)
                        let mut m2 = T::ZERO; // mean(gamma·dy·xhat)
                        for j in 0..n {
                            let gd = vgamma[j] * grow[j];
                            m1 += gd;
                            m2 += gd * hrow[j];
                        }
                        m1 *= inv_n;
                        m2 *= inv_n;
                        let istd = inv_std[i];
                        for j in 0..n {
                            let gd = vgamma[j] * grow[j];
                            gx[i * n + j] += istd * (gd - m1 - hrow[j] * m2);
                        }
                    }
                }
                if self.needs(*gamma) {
                    let gg = self.grad_slot(*gamma);
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += g.data()[i * n + j] * xhat.data()[i * n + j];
                        }
                    }
                }
                if self.needs(*beta) {
                    let gb = self.grad_slot(*beta);
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += g.data()[i * n + j];
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                if self.needs(*x) {
                    let y = self.nodes[i].value.data().to_vec();
                    let (m, n) = self.nodes[i].value.dims2()?;
                    let gx = self.grad_slot(*x);
                    for r in 0..m {
                        let yrow = &y[r * n..(r + 1) * n];
                        let grow = &g.data()[r * n..(r + 1) * n];
                        let dot: T = yrow
                            .iter()
                            .zip(grow)
                            .map(|(&yv, &gv)| yv * gv)
                            .sum();
                        for j in 0..n {
                            gx[r * n + j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropyRows {
                logits,
                targets,
                probs,
            } => {
                if self.needs(*logits) {
                    let (m, n) = probs.dims2()?;
                    let gv = g.data()[0] / T::from_f64(m as f64);
                    let gl = self.grad_slot(*logits);
                    for r in 0..m {
                        for j in 0..n {
                            let p = probs.data()[r * n + j];
                            let ind = if targets[r] == j { T::ONE } else { T::ZERO };
                            gl[r * n + j] += gv * (p - ind);
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if self.needs(*x) {
                    let (_, n) = self.nodes[x.0].value.dims2()?;
                    let gx = self.grad_slot(*x);
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..n {
                            gx[src * n + j] += g.data()[r * n + j];
                        }
                    }
                }
            }
            Op::GatherElems { x, idx } => {
                if self.needs(*x) {
                    let gx = self.grad_slot(*x);
                    for (o, &src) in idx.iter().enumerate() {
                        gx[src] += g.data()[o];
                    }
                }
            }
            Op::RowBlend { x, repl, mask } => {
                let n = self.nodes[repl.0].value.len();
                if self.needs(*x) {
                    let gx = self.grad_slot(*x);
                    for (r, &masked) in mask.iter().enumerate() {
                        if !masked {
                            for j in 0..n {
                                gx[r * n + j] += g.data()[r * n + j];
                            }
                        }
                    }
                }
                if self.needs(*repl) {
                    let gr = self.grad_slot(*repl);
                    for (r, &masked) in mask.iter().enumerate() {
                        if masked {
                            for j in 0..n {
                                gr[j] += g.data()[r * n + j];
                            }
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (m, na) = self.nodes[a.0].value.dims2()?;
                let (_, nb) = self.nodes[b.0].value.dims2()?;
                let n = na + nb;
                if self.needs(*a) {
                    let ga = self.grad_slot(*a);
                    for i in 0..m {
                        for j in 0..na {
                            ga[i * na + j] += g.data()[i * n + j];
                        }
                    }
                }
                if self.needs(*b) {
                    let gb = self.grad_slot(*b);
                    for i in 0..m {
                        for j in 0..nb {
                            gb[i * nb + j] += g.data()[i * n + na + j];
                        }
                    }
                }
            }
            Op::MeanPoolGroups { x, group } => {
                if self.needs(*x) {
                    let (m, n) = self.nodes[x.0].value.dims2()?;
                    let inv = T::ONE / T::from_f64(*group as f64);
                    let gx = self.grad_slot(*x);
                    for r in 0..m {
                        let gi = r / group;
                        for j in 0..n {
                            gx[r * n + j] += g.data()[gi * n + j] * inv;
                        }
                    }
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                if self.needs(*x) {
                    let y = self.nodes[i].value.data().to_vec();
                    let (m, n) = self.nodes[i].value.dims2()?;
                    let gx = self.grad_slot(*x);
                    for r in 0..m {
                        let norm = norms[r];
                        if norm.to_f64() <= 0.0 {
                            continue;
                        }
                        let yrow = &y[r * n..(r + 1) * n];
                        let grow = &g.data()[r * n..(r + 1) * n];
                        let dot: T = yrow
                            .iter()
                            .zip(grow)
                            .map(|(&yv, &gv)| yv * gv)
                            .sum();
                        for j in 0..n {
                            gx[r * n + j] += (grow[j] - yrow[j] * dot) / norm;
                        }
                    }
                }
            }
            Op::WindowAttention {
                q,
                k,
                v,
                bias,
                heads,
                win_tokens,
                scale,
                probs,
            } => {
                self.window_attention_bwd(
                    g, *q, *k, *v, *bias, *heads, *win_tokens, *scale, probs,
                )?;
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    accumulate(self.grad_slot(*x), g.data(), T::ONE);
                }
            }
        }
        self.nodes[i].op = op;
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn window_attention_bwd(
        &mut self,
        g: &Tensor<T>,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        bias: NodeId,
        heads: usize,
        win_tokens: usize,
        scale: T,
        probs: &Tensor<T>,
    ) -> Result<(), NnError> {
        let (rows, dim) = self.nodes[q.0].value.dims2()?;
        let dh = dim / heads;
        let n_windows = rows / win_tokens;
        let wt2 = win_tokens * win_tokens;

        let qd = self.nodes[q.0].value.data().to_vec();
        let kd = self.nodes[k.0].value.data().to_vec();
        let vd = self.nodes[v.0].value.data().to_vec();

        let mut gq = vec![T::ZERO; rows * dim];
        let mut gk = vec![T::ZERO; rows * dim];
        let mut gv = vec![T::ZERO; rows * dim];
        let mut gb = vec![T::ZERO; heads * wt2];

        let mut qb = vec![T::ZERO; win_tokens * dh];
        let mut kb = vec![T::ZERO; win_tokens * dh];
        let mut vb = vec![T::ZERO; win_tokens * dh];
        let mut dctx = vec![T::ZERO; win_tokens * dh];
        let mut dp = vec![T::ZERO; wt2];
        let mut ds = vec![T::ZERO; wt2];
        let mut dqb = vec![T::ZERO; win_tokens * dh];
        let mut dkb = vec![T::ZERO; win_tokens * dh];
        let mut dvb = vec![T::ZERO; win_tokens * dh];

        for u in 0..n_windows {
            for h in 0..heads {
                copy_block(&qd, dim, u * win_tokens, win_tokens, h * dh, dh, &mut qb);
                copy_block(&kd, dim, u * win_tokens, win_tokens, h * dh, dh, &mut kb);
                copy_block(&vd, dim, u * win_tokens, win_tokens, h * dh, dh, &mut vb);
                copy_block(
                    g.data(),
                    dim,
                    u * win_tokens,
                    win_tokens,
                    h * dh,
                    dh,
                    &mut dctx,
                );
                let prow = &probs.data()[(u * heads + h) * wt2..(u * heads + h + 1) * wt2];

                // dV = Pᵀ·dctx
                dvb.iter_mut().for_each(|x| *x = T::ZERO);
                matmul_tn_acc(prow, &dctx, win_tokens, win_tokens, dh, &mut dvb);
                // dP = dctx·Vᵀ
                dp.iter_mut().for_each(|x| *x = T::ZERO);
                matmul_nt_acc(&dctx, &vb, win_tokens, dh, win_tokens, &mut dp);
                // Softmax backward per row: dS = P ⊙ (dP − rowsum(dP ⊙ P)).
                for t in 0..win_tokens {
                    let pr = &prow[t * win_tokens..(t + 1) * win_tokens];
                    let dpr = &dp[t * win_tokens..(t + 1) * win_tokens];
                    let dot: T = pr.iter().zip(dpr).map(|(&a, &b)| a * b).sum();
                    let dsr = &mut ds[t * win_tokens..(t + 1) * win_tokens];
                    for j in 0..win_tokens {
                        dsr[j] = pr[j] * (dpr[j] - dot);
                    }
                }
                // Bias sees dS directly (summed over windows).
                let gbrow = &mut gb[h * wt2..(h + 1) * wt2];
                for (o, &d) in gbrow.iter_mut().zip(ds.iter()) {
                    *o += d;
                }
                // dQ = dS·K·scale, dK = dSᵀ·Q·scale.
                dqb.iter_mut().for_each(|x| *x = T::ZERO);
                matmul_nn_acc(&ds, &kb, win_tokens, win_tokens, dh, &mut dqb);
                for x in dqb.iter_mut() {
                    *x *= scale;
                }
                dkb.iter_mut().for_each(|x| *x = T::ZERO);
                matmul_tn_acc(&ds, &qb, win_tokens, win_tokens, dh, &mut dkb);
                for x in dkb.iter_mut() {
                    *x *= scale;
                }

                add_block(&mut gq, dim, u * win_tokens, win_tokens, h * dh, dh, &dqb);
                add_block(&mut gk, dim, u * win_tokens, win_tokens, h * dh, dh, &dkb);
                add_block(&mut gv, dim, u * win_tokens, win_tokens, h * dh, dh, &dvb);
            }
        }

        if self.needs(q) {
            accumulate(self.grad_slot(q), &gq, T::ONE);
        }
        if self.needs(k) {
            accumulate(self.grad_slot(k), &gk, T::ONE);
        }
        if self.needs(v) {
            accumulate(self.grad_slot(v), &gv, T::ONE);
        }
        if self.needs(bias) {
            accumulate(self.grad_slot(bias), &gb, T::ONE);
        }
        Ok(())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<T: Scalar>(out: &mut [T], src: &[T], scale: T) {
    debug_assert_eq!(out.len(), src.len());
    for (o, &s) in out.iter_mut().zip(src) {
        *o += s * scale;
    }
}

/// Copies a [rows × cols] block out of a row-major matrix with `stride`
/// columns, starting at (row0, col0).
fn copy_block<T: Scalar>(
    src: &[T],
    stride: usize,
    row0: usize,
    rows: usize,
    col0: usize,
    cols: usize,
    out: &mut [T],
) {
    debug_assert_eq!(out.len(), rows * cols);
    for r in 0..rows {
        let s = (row0 + r) * stride + col0;
        out[r * cols..(r + 1) * cols].copy_from_slice(&src[s..s + cols]);
    }
}

fn add_block<T: Scalar>(
    dst: &mut [T],
    stride: usize,
    row0: usize,
    rows: usize,
    col0: usize,
    cols: usize,
    src: &[T],
) {
    debug_assert_eq!(src.len(), rows * cols);
    for r in 0..rows {
        let d = (row0 + r) * stride + col0;
        for c in 0..cols {
            dst[d + c] += src[r * cols + c];
        }
    }
}

/// Stable softmax of one row into `out`; returns logsumexp of the row.
fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) -> T {
    let mut mx = row[0];
    for &v in row {
        mx = mx.maximum(v);
    }
    let mut sum = T::ZERO;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - mx).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    sum.ln() + mx
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::ONE + u.tanh())
}

fn gelu_bwd<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::ONE - t * t;
    half * (T::ONE + t) + half * x * sech2 * c * (T::ONE + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_forward_matches_hand_result() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t2(2, 2, &[5.0, 6.0, 7.0, 8.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(g.matmul(a, b).is_err());
        assert!(g.matmul_nt(a, b).is_ok());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t2(2, 3, &[1.0, 2.0, 3.0, -5.0, 0.0, 5.0]));
        let y = g.softmax_rows(x).unwrap();
        for r in 0..2 {
            let s: f64 = g.value(y).data()[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_n() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t2(2, 4, &[0.0; 8]));
        let loss = g
            .cross_entropy_rows(x, Arc::new(vec![1, 3]))
            .unwrap();
        assert!((g.value(loss).item().unwrap() - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn backward_twice_is_error() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn square_gradient_is_two_x() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let c = g.constant(Tensor::scalar(4.0));
        let y = g.mul(x, c).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn l2_normalize_zero_row_stays_zero() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t2(2, 2, &[0.0, 0.0, 3.0, 4.0]));
        let y = g.l2_normalize_rows(x).unwrap();
        assert_eq!(g.value(y).data()[..2], [0.0, 0.0]);
        assert!((g.value(y).data()[2] - 0.6).abs() < 1e-12);
        assert!((g.value(y).data()[3] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn row_blend_replaces_only_masked_rows() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t2(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]));
        let m = g.constant(Tensor::from_vec(&[2], vec![9.0, 9.0]).unwrap());
        let y = g
            .row_blend(x, m, Arc::new(vec![false, true, false]))
            .unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 1.0, 9.0, 9.0, 3.0, 3.0]);
    }

    #[test]
    fn mean_pool_groups_averages_consecutive_rows() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t2(4, 1, &[1.0, 3.0, 10.0, 20.0]));
        let y = g.mean_pool_groups(x, 2).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 15.0]);
    }

    // ── Finite-difference checks for every op's backward pass ──────────

    mod op_gradients {
        use super::*;
        use crate::nn::gradcheck::grad_check;
        use crate::nn::params::ParamSet;
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;

        use crate::nn::tensor::Scalar;

        fn filled<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
            let n: usize = shape.iter().product();
            let data: Vec<T> = (0..n)
                .map(|_| T::from_f64(rng.gen::<f64>() * 2.0 - 1.0))
                .collect();
            Tensor::from_vec(shape, data).unwrap()
        }

        /// Builds params from (name, shape) pairs, runs the graph closure,
        /// and asserts the analytic gradient matches central differences.
        fn check_t<T: Scalar>(
            shapes: &[(&str, &[usize])],
            eps: f64,
            tol: f64,
            build: impl Fn(&mut Graph<T>, &ParamBinding) -> Result<NodeId, NnError>,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            let mut ps: ParamSet<T> = ParamSet::new();
            for (name, shape) in shapes {
                ps.insert(name, filled(shape, &mut rng)).unwrap();
            }
            let loss = |p: &ParamSet<T>| -> Result<T, NnError> {
                let mut g = Graph::new();
                let b = g.bind(p);
                let out = build(&mut g, &b)?;
                g.value(out).item()
            };
            let loss_grad = |p: &ParamSet<T>| -> Result<(T, ParamSet<T>), NnError> {
                let mut g = Graph::new();
                let b = g.bind(p);
                let out = build(&mut g, &b)?;
                let v = g.value(out).item()?;
                g.backward(out)?;
                Ok((v, b.grads(&g)))
            };
            let report = grad_check(&ps, eps, loss, loss_grad).unwrap();
            assert!(
                report.max_rel_err < tol,
                "max rel err {} at {:?} (eps {eps}, tol {tol})",
                report.max_rel_err,
                report.worst
            );
        }

        /// Verifies the f32 analytic gradient against an f64 finite-difference
        /// oracle at the same parameter point. Evaluating the differences in
        /// f32 would bury the signal: f32 rounding noise alone exceeds 1e-3
        /// relative for curved ops at any eps.
        fn check_f32(
            ps32: ParamSet<f32>,
            build32: impl Fn(&mut Graph<f32>, &ParamBinding) -> Result<NodeId, NnError>,
            build64: impl Fn(&mut Graph<f64>, &ParamBinding) -> Result<NodeId, NnError>,
        ) {
            let grads32 = {
                let mut g: Graph<f32> = Graph::new();
                let b = g.bind(&ps32);
                let out = build32(&mut g, &b).unwrap();
                g.backward(out).unwrap();
                b.grads(&g)
            };
            let ps64: ParamSet<f64> = ps32.cast();
            let loss64 = |p: &ParamSet<f64>| -> f64 {
                let mut g: Graph<f64> = Graph::new();
                let b = g.bind(p);
                let out = build64(&mut g, &b).unwrap();
                g.value(out).item().unwrap()
            };
            let eps = 1e-6;
            let names: Vec<String> = ps64.names().map(str::to_string).collect();
            for name in &names {
                for i in 0..ps64.get(name).unwrap().len() {
                    let orig = ps64.get(name).unwrap().data()[i];
                    let mut p = ps64.clone();
                    p.get_mut(name).unwrap().data_mut()[i] = orig + eps;
                    let up = loss64(&p);
                    p.get_mut(name).unwrap().data_mut()[i] = orig - eps;
                    let down = loss64(&p);
                    let numeric = (up - down) / (2.0 * eps);
                    let a = grads32.get(name).unwrap().data()[i] as f64;
                    let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                    assert!(
                        rel < 1e-3,
                        "f32 grad {name}[{i}]: analytic {a} vs f64 oracle {numeric} (rel {rel})"
                    );
                }
            }
        }

        /// Each op scenario runs at f64 (tight bound) and at f32, the
        /// training precision, against the f64 oracle.
        macro_rules! op_grad_test {
            ($name:ident, $shapes:expr, $build:expr) => {
                #[test]
                fn $name() {
                    check_t::<f64>($shapes, 1e-6, 1e-6, $build);
                    let shapes: &[(&str, &[usize])] = $shapes;
                    let mut rng = ChaCha8Rng::seed_from_u64(17);
                    let mut ps32: ParamSet<f32> = ParamSet::new();
                    for (name, shape) in shapes {
                        ps32.insert(name, filled(shape, &mut rng)).unwrap();
                    }
                    check_f32(ps32, $build, $build);
                }
            };
        }

        op_grad_test!(matmul_chain, &[("a", &[3, 4]), ("b", &[4, 2])], |g, b| {
            let m = g.matmul(b.id("a")?, b.id("b")?)?;
            Ok(g.sum(m))
        });

        op_grad_test!(matmul_nt_chain, &[("a", &[3, 4]), ("b", &[2, 4])], |g, b| {
            let m = g.matmul_nt(b.id("a")?, b.id("b")?)?;
            Ok(g.sum(m))
        });

        op_grad_test!(
            elementwise_mix,
            &[("a", &[2, 3]), ("b", &[2, 3]), ("c", &[3])],
            |g, b| {
                let s = g.sub(b.id("a")?, b.id("b")?)?;
                let m = g.mul(s, b.id("a")?)?;
                let r = g.add_row(m, b.id("c")?)?;
                let sc = g.scale(r, 0.7);
                Ok(g.sum(sc))
            }
        );

        op_grad_test!(gelu_chain, &[("a", &[3, 3])], |g, b| {
            let h = g.gelu(b.id("a")?);
            Ok(g.sum(h))
        });

        op_grad_test!(
            layer_norm_full,
            &[("x", &[4, 6]), ("gamma", &[6]), ("beta", &[6])],
            |g, b| {
                let y = g.layer_norm(b.id("x")?, b.id("gamma")?, b.id("beta")?, 1e-5)?;
                // Mix with a nonlinearity so every output entry matters
                // differently.
                let h = g.gelu(y);
                Ok(g.sum(h))
            }
        );

        op_grad_test!(softmax_rows_full, &[("x", &[3, 5]), ("w", &[3, 5])], |g, b| {
            let y = g.softmax_rows(b.id("x")?)?;
            let m = g.mul(y, b.id("w")?)?;
            Ok(g.sum(m))
        });

        op_grad_test!(cross_entropy_rows_full, &[("x", &[4, 3])], |g, b| {
            g.cross_entropy_rows(b.id("x")?, Arc::new(vec![0, 2, 1, 2]))
        });

        op_grad_test!(
            gather_and_blend,
            &[("x", &[5, 3]), ("repl", &[3])],
            |g, b| {
                let blended = g.row_blend(
                    b.id("x")?,
                    b.id("repl")?,
                    Arc::new(vec![true, false, false, true, false]),
                )?;
                let picked = g.gather_rows(blended, Arc::new(vec![4, 0, 0, 2]))?;
                let h = g.gelu(picked);
                Ok(g.sum(h))
            }
        );

        op_grad_test!(gather_elems_table, &[("t", &[6, 2]), ("w", &[2, 4])], |g, b| {
            let picked = g.gather_elems(
                b.id("t")?,
                Arc::new(vec![0, 5, 5, 3, 8, 11, 2, 2]),
                &[2, 4],
            )?;
            let m = g.mul(picked, b.id("w")?)?;
            Ok(g.sum(m))
        });

        op_grad_test!(concat_and_pool, &[("a", &[4, 2]), ("b", &[4, 3])], |g, bd| {
            let c = g.concat_cols(bd.id("a")?, bd.id("b")?)?;
            let p = g.mean_pool_groups(c, 2)?;
            let h = g.gelu(p);
            Ok(g.sum(h))
        });

        op_grad_test!(l2_normalize_full, &[("x", &[3, 4]), ("w", &[3, 4])], |g, b| {
            let y = g.l2_normalize_rows(b.id("x")?)?;
            let m = g.mul(y, b.id("w")?)?;
            Ok(g.sum(m))
        });

        // 2 windows of 4 tokens, 2 heads of dim 3.
        op_grad_test!(
            window_attention_full,
            &[
                ("q", &[8, 6]),
                ("k", &[8, 6]),
                ("v", &[8, 6]),
                ("bias", &[2, 16]),
                ("w", &[8, 6]),
            ],
            |g, b| {
                let a = g.window_attention(
                    b.id("q")?,
                    b.id("k")?,
                    b.id("v")?,
                    b.id("bias")?,
                    2,
                    4,
                )?;
                let m = g.mul(a, b.id("w")?)?;
                Ok(g.sum(m))
            }
        );

        op_grad_test!(reshape_passthrough, &[("x", &[2, 6])], |g, b| {
            let r = g.reshape(b.id("x")?, &[4, 3])?;
            let h = g.gelu(r);
            Ok(g.sum(h))
        });

        #[test]
        fn abs_away_from_zero() {
            // Values bounded away from 0 so the kink is never crossed.
            fn vals<T: Scalar>() -> ParamSet<T> {
                let data: Vec<T> = [0.8, -0.6, 1.4, -2.2]
                    .iter()
                    .map(|&v| T::from_f64(v))
                    .collect();
                let mut ps: ParamSet<T> = ParamSet::new();
                ps.insert("a", Tensor::from_vec(&[4], data).unwrap()).unwrap();
                ps
            }
            let build = |g: &mut Graph<f64>, b: &ParamBinding| {
                let a = g.abs(b.id("a")?);
                Ok(g.sum(a))
            };
            let loss = |p: &ParamSet<f64>| -> Result<f64, NnError> {
                let mut g = Graph::new();
                let b = g.bind(p);
                let out = build(&mut g, &b)?;
                g.value(out).item()
            };
            let loss_grad = |p: &ParamSet<f64>| -> Result<(f64, ParamSet<f64>), NnError> {
                let mut g = Graph::new();
                let b = g.bind(p);
                let out = build(&mut g, &b)?;
                let v = g.value(out).item()?;
                g.backward(out)?;
                Ok((v, b.grads(&g)))
            };
            let report = grad_check(&vals::<f64>(), 1e-6, loss, loss_grad).unwrap();
            assert!(report.max_rel_err < 1e-6, "rel {}", report.max_rel_err);

            check_f32(
                vals::<f32>(),
                |g, b| {
                    let a = g.abs(b.id("a")?);
                    Ok(g.sum(a))
                },
                build,
            );
        }
    }
}
