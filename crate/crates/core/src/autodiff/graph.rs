//! Recorded computation graph with reverse-mode differentiation.
//!
//! Every value is a row-major matrix. Leaves either borrow a parameter
//! tensor for the lifetime of the graph or own their data. Nodes whose
//! inputs never lead back to a gradient-requiring leaf are skipped during
//! the backward sweep, so frozen weights cost nothing beyond the forward.

use std::borrow::Cow;

use super::kernels::{axpy, dot, matmul_acc, matmul_at_acc, matmul_bt_acc, softmax_in_place};
use super::tensor::{ParamGroup, Tensor};
use super::AutodiffError;
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    SumAll(Var),
    ConcatRows(Vec<Var>),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        causal: bool,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<'a, T: Clone> {
    rows: usize,
    cols: usize,
    value: Cow<'a, [T]>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of the leaves of one graph, detached from its borrows.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

impl<'a, T: Scalar> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Cow<'a, [T]>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node { rows, cols, value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Borrows `t` as a leaf.
    pub fn leaf(&mut self, t: &'a Tensor<T>, requires_grad: bool) -> Var {
        let (r, c) = t.dims2();
        self.push(r, c, Cow::Borrowed(t.data()), Op::Leaf, requires_grad)
    }

    /// Owned leaf, for inputs and constants.
    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<T>, requires_grad: bool) -> Result<Var, AutodiffError> {
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            return Err(AutodiffError::Shape(format!(
                "input [{rows}, {cols}] with {} values",
                data.len()
            )));
        }
        Ok(self.push(rows, cols, Cow::Owned(data), Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Result<Var, AutodiffError> {
        self.input(rows, cols, data, false)
    }

    /// Binds every tensor of `group`; gradients are tracked unless frozen.
    pub fn bind(&mut self, group: &'a ParamGroup<T>) -> Vec<Var> {
        self.bind_with(group, !group.frozen)
    }

    pub fn bind_with(&mut self, group: &'a ParamGroup<T>, requires_grad: bool) -> Vec<Var> {
        group.tensors.iter().map(|t| self.leaf(t, requires_grad)).collect()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> Result<T, AutodiffError> {
        let n = &self.nodes[v.0];
        if n.value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(n.value.len()));
        }
        Ok(n.value[0])
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn finite(&self, out: &[T], op: &str) -> Result<(), AutodiffError> {
        if out.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(AutodiffError::NonFinite(format!("{op} produced a non-finite value")))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(AutodiffError::Shape(format!("matmul [{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        self.finite(&out, "matmul")?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(m, n, Cow::Owned(out), Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ` with `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(AutodiffError::Shape(format!("matmul_bt [{m},{k}] x [{n},{k2}]^T")));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_bt_acc(self.value(a), self.value(b), &mut out, m, k, n);
        self.finite(&out, "matmul_bt")?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(m, n, Cow::Owned(out), Op::MatMulBT(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<(usize, usize), AutodiffError> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(AutodiffError::Shape(format!("{op} {da:?} vs {db:?}")));
        }
        Ok(da)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.same_shape(a, b, "add")?;
        let out: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        self.finite(&out, "add")?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(r, c, Cow::Owned(out), Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.same_shape(a, b, "mul")?;
        let out: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        self.finite(&out, "mul")?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(r, c, Cow::Owned(out), Op::Mul(a, b), ng))
    }

    /// Adds a `[1, c]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.dims(a);
        if self.dims(bias) != (1, c) {
            return Err(AutodiffError::Shape(format!(
                "add_row bias {:?} for [{r},{c}]",
                self.dims(bias)
            )));
        }
        let bv = self.value(bias);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(c) {
            row.iter_mut().zip(bv).for_each(|(o, &b)| *o += b);
        }
        self.finite(&out, "add_row")?;
        let ng = self.ng(&[a, bias]);
        Ok(self.push(r, c, Cow::Owned(out), Op::AddRow(a, bias), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var, AutodiffError> {
        let (r, c) = self.dims(a);
        let out: Vec<T> = self.value(a).iter().map(|&x| x * s).collect();
        self.finite(&out, "scale")?;
        let ng = self.ng(&[a]);
        Ok(self.push(r, c, Cow::Owned(out), Op::Scale(a, s), ng))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.dims(a);
        let out: Vec<T> = self.value(a).iter().map(|&x| x.max(T::zero())).collect();
        let ng = self.ng(&[a]);
        Ok(self.push(r, c, Cow::Owned(out), Op::Relu(a), ng))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.dims(a);
        let out: Vec<T> = self.value(a).iter().map(|&x| gelu(x)).collect();
        self.finite(&out, "gelu")?;
        let ng = self.ng(&[a]);
        Ok(self.push(r, c, Cow::Owned(out), Op::Gelu(a), ng))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let s: T = self.value(a).iter().copied().sum();
        self.finite(&[s], "sum_all")?;
        let ng = self.ng(&[a]);
        Ok(self.push(1, 1, Cow::Owned(vec![s]), Op::SumAll(a), ng))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let Some(&first) = parts.first() else {
            return Err(AutodiffError::Shape("concat_rows of nothing".into()));
        };
        let c = self.dims(first).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, pc) = self.dims(p);
            if pc != c {
                return Err(AutodiffError::Shape(format!("concat_rows width {pc} vs {c}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let ng = self.ng(parts);
        Ok(self.push(rows, c, Cow::Owned(out), Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Gathers rows of `table`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, AutodiffError> {
        let (v, d) = self.dims(table);
        if ids.is_empty() {
            return Err(AutodiffError::Shape("embedding of an empty id list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(AutodiffError::Shape(format!("token id {bad} outside table of {v} rows")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let ng = self.ng(&[table]);
        Ok(self.push(ids.len(), d, Cow::Owned(out), Op::Embedding { table, ids: ids.to_vec() }, ng))
    }

    /// Row-wise layer normalization with affine `[1, c]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.dims(x);
        if self.dims(gain) != (1, c) || self.dims(bias) != (1, c) {
            return Err(AutodiffError::Shape(format!("layer_norm affine for width {c}")));
        }
        let eps = T::lit(LN_EPS);
        let cn = T::from_usize(c).unwrap();
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let rs = (var + eps).sqrt().recip();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv[j] + bv[j];
            }
        }
        self.finite(&out, "layer_norm")?;
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(r, c, Cow::Owned(out), Op::LayerNorm { x, gain, bias, xhat, rstd }, ng))
    }

    /// Scaled dot-product attention over `heads` column blocks.
    ///
    /// With `causal`, query `i` sees keys `j <= i + (lk - lq)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var, AutodiffError> {
        let (lq, d) = self.dims(q);
        let (lk, dk) = self.dims(k);
        if dk != d || self.dims(v) != (lk, d) || heads == 0 || d % heads != 0 {
            return Err(AutodiffError::Shape(format!(
                "attention q [{lq},{d}] k [{lk},{dk}] v {:?} heads {heads}",
                self.dims(v)
            )));
        }
        if causal && lk < lq {
            return Err(AutodiffError::Shape("causal attention needs lk >= lq".into()));
        }
        let dh = d / heads;
        let scale = T::from_usize(dh).unwrap().sqrt().recip();
        let off = if causal { lk - lq } else { 0 };
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); heads * lq * lk];
        let mut out = vec![T::zero(); lq * d];
        for h in 0..heads {
            let hs = h * dh;
            for i in 0..lq {
                let visible = if causal { i + off + 1 } else { lk };
                let qi = &qv[i * d + hs..i * d + hs + dh];
                let p = &mut probs[(h * lq + i) * lk..(h * lq + i) * lk + visible];
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj = dot(qi, &kv[j * d + hs..j * d + hs + dh]) * scale;
                }
                softmax_in_place(p);
                let oi = &mut out[i * d + hs..i * d + hs + dh];
                for (j, &pj) in p.iter().enumerate() {
                    axpy(pj, &vv[j * d + hs..j * d + hs + dh], oi);
                }
            }
        }
        self.finite(&out, "attention")?;
        let ng = self.ng(&[q, k, v]);
        Ok(self.push(lq, d, Cow::Owned(out), Op::Attention { q, k, v, heads, causal, probs }, ng))
    }

    /// Summed token cross-entropy `Σ_i -log softmax(logits_i)[targets_i]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, AutodiffError> {
        let (n, vsz) = self.dims(logits);
        if targets.len() != n {
            return Err(AutodiffError::Shape(format!("{} targets for {n} logit rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vsz) {
            return Err(AutodiffError::Shape(format!("target id {bad} outside vocabulary of {vsz}")));
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = &mut probs[i * vsz..(i + 1) * vsz];
            let raw = row[t];
            let lse = softmax_in_place(row);
            loss += lse - raw;
        }
        self.finite(&[loss], "cross_entropy")?;
        let ng = self.ng(&[logits]);
        Ok(self.push(
            1,
            1,
            Cow::Owned(vec![loss]),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            ng,
        ))
    }

    /// Reverse sweep from a one-element `loss`.
    ///
    /// Only leaves that require gradients receive one; frozen leaves and
    /// everything downstream only of frozen leaves are skipped.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, AutodiffError> {
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(ln.value.len()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !ln.needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) || !n.needs_grad {
                grads[i] = None;
            } else if let Some(g) = &grads[i] {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(AutodiffError::NonFinite(format!("gradient of leaf {i}")));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<'a, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = node.cols;
                if wants(*a) {
                    matmul_bt_acc(g, self.value(*b), slot(grads, nodes, *a), m, n, k);
                }
                if wants(*b) {
                    matmul_at_acc(self.value(*a), g, slot(grads, nodes, *b), m, k, n);
                }
            }
            Op::MatMulBT(a, b) => {
                let (m, k) = self.dims(*a);
                let n = node.cols;
                if wants(*a) {
                    matmul_acc(g, self.value(*b), slot(grads, nodes, *a), m, n, k);
                }
                if wants(*b) {
                    matmul_at_acc(g, self.value(*a), slot(grads, nodes, *b), m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        axpy(T::one(), g, slot(grads, nodes, v));
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = self.value(*b);
                    let s = slot(grads, nodes, *a);
                    for i in 0..g.len() {
                        s[i] += g[i] * bv[i];
                    }
                }
                if wants(*b) {
                    let av = self.value(*a);
                    let s = slot(grads, nodes, *b);
                    for i in 0..g.len() {
                        s[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if wants(*a) {
                    axpy(T::one(), g, slot(grads, nodes, *a));
                }
                if wants(*bias) {
                    let s = slot(grads, nodes, *bias);
                    for row in g.chunks_exact(node.cols) {
                        axpy(T::one(), row, s);
                    }
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    axpy(*c, g, slot(grads, nodes, *a));
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let av = self.value(*a);
                    let s = slot(grads, nodes, *a);
                    for i in 0..g.len() {
                        if av[i] > T::zero() {
                            s[i] += g[i];
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if wants(*a) {
                    let av = self.value(*a);
                    let s = slot(grads, nodes, *a);
                    for i in 0..g.len() {
                        s[i] += g[i] * gelu_grad(av[i]);
                    }
                }
            }
            Op::SumAll(a) => {
                if wants(*a) {
                    let s = slot(grads, nodes, *a);
                    s.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p.0].value.len();
                    if wants(p) {
                        axpy(T::one(), &g[off..off + n], slot(grads, nodes, p));
                    }
                    off += n;
                }
            }
            Op::Embedding { table, ids } => {
                if wants(*table) {
                    let d = node.cols;
                    let s = slot(grads, nodes, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(T::one(), &g[r * d..(r + 1) * d], &mut s[id * d..(id + 1) * d]);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let c = node.cols;
                if wants(*bias) {
                    let s = slot(grads, nodes, *bias);
                    for row in g.chunks_exact(c) {
                        axpy(T::one(), row, s);
                    }
                }
                if wants(*gain) {
                    let s = slot(grads, nodes, *gain);
                    for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            s[j] += gr[j] * hr[j];
                        }
                    }
                }
                if wants(*x) {
                    let gv = self.value(*gain);
                    let cn = T::from_usize(c).unwrap();
                    let s = slot(grads, nodes, *x);
                    let mut dh = vec![T::zero(); c];
                    for (i, (gr, hr)) in g.chunks_exact(c).zip(xhat.chunks_exact(c)).enumerate() {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            dh[j] = gr[j] * gv[j];
                            m1 += dh[j];
                            m2 += dh[j] * hr[j];
                        }
                        m1 /= cn;
                        m2 /= cn;
                        let sr = &mut s[i * c..(i + 1) * c];
                        for j in 0..c {
                            sr[j] += rstd[i] * (dh[j] - m1 - hr[j] * m2);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, causal, probs } => {
                self.attention_backward(node, g, grads, (*q, *k, *v), *heads, *causal, probs);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if wants(*logits) {
                    let vsz = nodes[logits.0].cols;
                    let s = slot(grads, nodes, *logits);
                    axpy(g[0], probs, s);
                    for (i, &t) in targets.iter().enumerate() {
                        s[i * vsz + t] -= g[0];
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        node: &Node<'a, T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        (q, k, v): (Var, Var, Var),
        heads: usize,
        causal: bool,
        probs: &[T],
    ) {
        let nodes = &self.nodes;
        let (lq, d) = (node.rows, node.cols);
        let lk = nodes[k.0].rows;
        let dh = d / heads;
        let scale = T::from_usize(dh).unwrap().sqrt().recip();
        let off = if causal { lk - lq } else { 0 };
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (wq, wk, wv) = (nodes[q.0].needs_grad, nodes[k.0].needs_grad, nodes[v.0].needs_grad);
        let mut dq = if wq { vec![T::zero(); lq * d] } else { Vec::new() };
        let mut dk = if wk { vec![T::zero(); lk * d] } else { Vec::new() };
        let mut dv = if wv { vec![T::zero(); lk * d] } else { Vec::new() };
        let mut ds = vec![T::zero(); lk];
        for h in 0..heads {
            let hs = h * dh;
            for i in 0..lq {
                let visible = if causal { i + off + 1 } else { lk };
                let p = &probs[(h * lq + i) * lk..(h * lq + i) * lk + visible];
                let go = &g[i * d + hs..i * d + hs + dh];
                let mut pdp = T::zero();
                for j in 0..visible {
                    let vj = &vv[j * d + hs..j * d + hs + dh];
                    let dp = dot(go, vj);
                    ds[j] = dp;
                    pdp += p[j] * dp;
                    if wv {
                        axpy(p[j], go, &mut dv[j * d + hs..j * d + hs + dh]);
                    }
                }
                if !(wq || wk) {
                    continue;
                }
                let qi = &qv[i * d + hs..i * d + hs + dh];
                for j in 0..visible {
                    let s = p[j] * (ds[j] - pdp) * scale;
                    if s == T::zero() {
                        continue;
                    }
                    if wq {
                        axpy(s, &kv[j * d + hs..j * d + hs + dh], &mut dq[i * d + hs..i * d + hs + dh]);
                    }
                    if wk {
                        axpy(s, qi, &mut dk[j * d + hs..j * d + hs + dh]);
                    }
                }
            }
        }
        if wq {
            axpy(T::one(), &dq, slot(grads, nodes, q));
        }
        if wk {
            axpy(T::one(), &dk, slot(grads, nodes, k));
        }
        if wv {
            axpy(T::one(), &dv, slot(grads, nodes, v));
        }
    }
}

fn slot<'g, T: Scalar>(grads: &'g mut [Option<Vec<T>>], nodes: &[Node<'_, T>], v: Var) -> &'g mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()])
}

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let inner = c * (x + T::lit(0.044715) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let inner = c * (x + T::lit(0.044715) * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::lit(3.0 * 0.044715) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * dinner
}
