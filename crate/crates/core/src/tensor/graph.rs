//! Linear tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and enough
//! context to run its backward rule. `backward` walks the tape once in
//! reverse, so a node reused by several consumers sums their contributions.

use super::kernels;
use super::{Result, Scalar, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    /// Broadcast a length-n vector over every row of an m×n matrix.
    AddRow(Var, Var),
    Gelu(Var),
    /// Masked (causal) entries are exactly zero, so backward needs no mask.
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        stats: Vec<(F, F)>,
        beta: Var,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<F>,
        denom: F,
    },
}

struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Recording context for one forward/backward pass.
pub struct Graph<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    record: bool,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => Err(TensorError::Usage(format!("expected a 2-D operand, got shape {shape:?}"))),
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), record: true }
    }

    /// A graph that never tracks gradients, for evaluation and generation.
    pub fn inference() -> Self {
        Self { record: false, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node created after the first `len`, along with any
    /// gradients. Handles to dropped nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.grads.clear();
    }

    fn push(
        &mut self,
        op: &'static str,
        shape: Vec<usize>,
        value: Vec<F>,
        node_op: Op<F>,
        needs_grad: bool,
    ) -> Result<Var> {
        kernels::check_finite(op, &value)?;
        self.nodes.push(Node { shape, value, op: node_op, needs_grad: needs_grad && self.record });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node<F> {
        &self.nodes[v.0]
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Copies a tensor onto the tape. It is differentiated iff the tensor
    /// has `requires_grad` set.
    pub fn leaf(&mut self, t: &Tensor<F>) -> Result<Var> {
        self.push("leaf", t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<F>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        self.leaf(&t)
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<F> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> F {
        self.node(v).value[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a))?;
        let (k2, n) = dims2(self.shape(b))?;
        if k != k2 {
            return Err(TensorError::Shape { op: "matmul", lhs: self.shape(a).to_vec(), rhs: self.shape(b).to_vec() });
        }
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let ng = self.needs(&[a, b]);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ` where `a` is m×k and `b` is n×k.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a))?;
        let (n, k2) = dims2(self.shape(b))?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul_t",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = kernels::matmul_t(self.value(a), self.value(b), m, k, n);
        let ng = self.needs(&[a, b]);
        self.push("matmul_t", vec![m, n], out, Op::MatMulT(a, b), ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape { op, lhs: self.shape(a).to_vec(), rhs: self.shape(b).to_vec() });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let ng = self.needs(&[a, b]);
        let shape = self.shape(a).to_vec();
        self.push("add", shape, out, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let ng = self.needs(&[a, b]);
        let shape = self.shape(a).to_vec();
        self.push("mul", shape, out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, s: F) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v * s).collect();
        let ng = self.needs(&[x]);
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, out, Op::Scale(x, s), ng)
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(x))?;
        if self.shape(row) != [n] {
            return Err(TensorError::Shape {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row);
        let mut out = self.value(x).to_vec();
        for i in 0..m {
            for (o, &b) in out[i * n..(i + 1) * n].iter_mut().zip(r) {
                *o = *o + b;
            }
        }
        let ng = self.needs(&[x, row]);
        self.push("add_row", vec![m, n], out, Op::AddRow(x, row), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        let ng = self.needs(&[x]);
        let shape = self.shape(x).to_vec();
        self.push("gelu", shape, out, Op::Gelu(x), ng)
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, false)
    }

    /// Row-wise softmax over columns `0..=row`; entries past the diagonal
    /// are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, true)
    }

    fn softmax_impl(&mut self, x: Var, causal: bool) -> Result<Var> {
        let (m, n) = dims2(self.shape(x))?;
        kernels::check_finite("softmax", self.value(x))?;
        let out = kernels::softmax_rows(self.value(x), m, n, causal);
        let ng = self.needs(&[x]);
        self.push("softmax", vec![m, n], out, Op::Softmax(x), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        if !(eps > F::zero()) {
            return Err(TensorError::Usage("layer_norm eps must be positive".into()));
        }
        let (m, n) = dims2(self.shape(x))?;
        for p in [gamma, beta] {
            if self.shape(p) != [n] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (out, stats) = kernels::layer_norm(self.value(x), self.value(gamma), self.value(beta), m, n, eps);
        let ng = self.needs(&[x, gamma, beta]);
        self.push("layer_norm", vec![m, n], out, Op::LayerNorm { x, gamma, stats, beta }, ng)
    }

    /// Selects rows of `table` (an embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = dims2(self.shape(table))?;
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::Index { op: "gather_rows", index: id, size: rows });
            }
            out.extend_from_slice(&src[id * cols..(id + 1) * cols]);
        }
        let ng = self.needs(&[table]);
        self.push("gather_rows", vec![ids.len(), cols], out, Op::Gather { table, ids: ids.to_vec() }, ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2(self.shape(x))?;
        if start + len > n {
            return Err(TensorError::Index { op: "slice_cols", index: start + len, size: n });
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let ng = self.needs(&[x]);
        self.push("slice_cols", vec![m, len], out, Op::SliceCols { x, start }, ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2(self.shape(x))?;
        if start + len > m {
            return Err(TensorError::Index { op: "slice_rows", index: start + len, size: m });
        }
        let out = self.value(x)[start * n..(start + len) * n].to_vec();
        let ng = self.needs(&[x]);
        self.push("slice_rows", vec![len, n], out, Op::SliceRows { x, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| TensorError::Usage("concat_cols of nothing".into()))?;
        let (m, _) = dims2(self.shape(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = dims2(self.shape(p))?;
            if pm != m {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let ng = self.needs(parts);
        self.push("concat_cols", vec![m, total], out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().fold(F::zero(), |acc, &v| acc + v);
        let ng = self.needs(&[x]);
        self.push("sum", vec![1], vec![s], Op::Sum(x), ng)
    }

    /// Mean negative log-likelihood of `targets` over the unmasked rows of
    /// `logits`. An all-masked input yields 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let count = mask.iter().filter(|&&m| m).count();
        let denom = F::from_f64(count.max(1) as f64);
        self.cross_entropy_with_denominator(logits, targets, mask, denom)
    }

    /// Sum of the unmasked negative log-likelihoods divided by `denom`, so a
    /// batch of sequences can share one normalizer.
    pub fn cross_entropy_with_denominator(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
        denom: F,
    ) -> Result<Var> {
        let (t, v) = dims2(self.shape(logits))?;
        if targets.len() != t || mask.len() != t {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len(), mask.len()],
            });
        }
        if !(denom > F::zero()) {
            return Err(TensorError::Usage("cross_entropy denominator must be positive".into()));
        }
        let x = self.value(logits);
        kernels::check_finite("cross_entropy", x)?;
        let mut probs = vec![F::zero(); t * v];
        let mut total = F::zero();
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            let target = targets[i];
            if target >= v {
                return Err(TensorError::Index { op: "cross_entropy", index: target, size: v });
            }
            let row = &x[i * v..(i + 1) * v];
            let max = row.iter().fold(F::neg_infinity(), |m, &z| m.max(z));
            let mut sum = F::zero();
            for &z in row {
                sum = sum + (z - max).exp();
            }
            let lse = max + sum.ln();
            total = total + (lse - row[target]);
            for (p, &z) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                *p = (z - max).exp() / sum;
            }
        }
        let ng = self.needs(&[logits]);
        self.push(
            "cross_entropy",
            vec![1],
            vec![total / denom],
            Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec(), probs, denom },
            ng,
        )
    }

    /// Reverse pass from a scalar node. Gradients are then available via
    /// [`Graph::grad`] for every node that required them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        if !self.record {
            return Err(TensorError::Usage("backward on an inference graph".into()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.node(loss).needs_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(dy) = self.grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &dy)?;
            self.grads[idx] = Some(dy);
        }
        Ok(())
    }

    fn add_grad(&mut self, v: Var, contribution: Vec<F>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(&contribution).for_each(|(a, &b)| *a = *a + b),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn backprop_node(&mut self, idx: usize, dy: &[F]) -> Result<()> {
        let node = &self.nodes[idx];
        let mut updates: Vec<(Var, Vec<F>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(&self.nodes[a.0].shape)?;
                let (_, n) = dims2(&self.nodes[b.0].shape)?;
                if self.nodes[a.0].needs_grad {
                    updates.push((*a, kernels::matmul_t(dy, &self.nodes[b.0].value, m, n, k)));
                }
                if self.nodes[b.0].needs_grad {
                    updates.push((*b, kernels::t_matmul(&self.nodes[a.0].value, dy, m, k, n)));
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = dims2(&self.nodes[a.0].shape)?;
                let (n, _) = dims2(&self.nodes[b.0].shape)?;
                if self.nodes[a.0].needs_grad {
                    updates.push((*a, kernels::matmul(dy, &self.nodes[b.0].value, m, n, k)));
                }
                if self.nodes[b.0].needs_grad {
                    updates.push((*b, kernels::t_matmul(dy, &self.nodes[a.0].value, m, n, k)));
                }
            }
            Op::Add(a, b) => {
                updates.push((*a, dy.to_vec()));
                updates.push((*b, dy.to_vec()));
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                updates.push((*a, dy.iter().zip(bv).map(|(&g, &y)| g * y).collect()));
                updates.push((*b, dy.iter().zip(av).map(|(&g, &x)| g * x).collect()));
            }
            Op::Scale(x, s) => {
                updates.push((*x, dy.iter().map(|&g| g * *s).collect()));
            }
            Op::AddRow(x, row) => {
                let (m, n) = dims2(&node.shape)?;
                let mut drow = vec![F::zero(); n];
                for i in 0..m {
                    for (d, &g) in drow.iter_mut().zip(&dy[i * n..(i + 1) * n]) {
                        *d = *d + g;
                    }
                }
                updates.push((*x, dy.to_vec()));
                updates.push((*row, drow));
            }
            Op::Gelu(x) => {
                let xv = &self.nodes[x.0].value;
                updates.push((*x, dy.iter().zip(xv).map(|(&g, &v)| g * kernels::gelu_grad(v)).collect()));
            }
            Op::Softmax(x) => {
                let (m, n) = dims2(&node.shape)?;
                let y = &node.value;
                let mut dx = vec![F::zero(); m * n];
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &dy[i * n..(i + 1) * n];
                    let dot = yr.iter().zip(gr).fold(F::zero(), |s, (&a, &b)| s + a * b);
                    for j in 0..n {
                        dx[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                updates.push((*x, dx));
            }
            Op::LayerNorm { x, gamma, stats, beta } => {
                let (m, n) = dims2(&node.shape)?;
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gamma.0].value;
                let nf = F::from_f64(n as f64);
                let mut dx = vec![F::zero(); m * n];
                let mut dgamma = vec![F::zero(); n];
                let mut dbeta = vec![F::zero(); n];
                let mut xhat = vec![F::zero(); n];
                let mut dxhat = vec![F::zero(); n];
                for i in 0..m {
                    let (mean, rstd) = stats[i];
                    let gr = &dy[i * n..(i + 1) * n];
                    let mut sum_d = F::zero();
                    let mut sum_dx = F::zero();
                    for j in 0..n {
                        xhat[j] = (xv[i * n + j] - mean) * rstd;
                        dxhat[j] = gr[j] * gv[j];
                        dgamma[j] = dgamma[j] + gr[j] * xhat[j];
                        dbeta[j] = dbeta[j] + gr[j];
                        sum_d = sum_d + dxhat[j];
                        sum_dx = sum_dx + dxhat[j] * xhat[j];
                    }
                    let mean_d = sum_d / nf;
                    let mean_dx = sum_dx / nf;
                    for j in 0..n {
                        dx[i * n + j] = rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                    }
                }
                updates.push((*x, dx));
                updates.push((*gamma, dgamma));
                updates.push((*beta, dbeta));
            }
            Op::Gather { table, ids } => {
                let (rows, cols) = dims2(&self.nodes[table.0].shape)?;
                let mut dt = vec![F::zero(); rows * cols];
                for (i, &id) in ids.iter().enumerate() {
                    for (d, &g) in dt[id * cols..(id + 1) * cols].iter_mut().zip(&dy[i * cols..(i + 1) * cols]) {
                        *d = *d + g;
                    }
                }
                updates.push((*table, dt));
            }
            Op::SliceCols { x, start } => {
                let (m, n) = dims2(&self.nodes[x.0].shape)?;
                let (_, len) = dims2(&node.shape)?;
                let mut dx = vec![F::zero(); m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + len].copy_from_slice(&dy[i * len..(i + 1) * len]);
                }
                updates.push((*x, dx));
            }
            Op::SliceRows { x, start } => {
                let (m, n) = dims2(&self.nodes[x.0].shape)?;
                let mut dx = vec![F::zero(); m * n];
                dx[start * n..start * n + dy.len()].copy_from_slice(dy);
                updates.push((*x, dx));
            }
            Op::ConcatCols(parts) => {
                let (m, total) = dims2(&node.shape)?;
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = dims2(&self.nodes[p.0].shape)?;
                    let mut dp = Vec::with_capacity(m * w);
                    for i in 0..m {
                        dp.extend_from_slice(&dy[i * total + offset..i * total + offset + w]);
                    }
                    offset += w;
                    updates.push((p, dp));
                }
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.len();
                updates.push((*x, vec![dy[0]; n]));
            }
            Op::CrossEntropy { logits, targets, mask, probs, denom } => {
                let (t, v) = dims2(&self.nodes[logits.0].shape)?;
                let scale = dy[0] / *denom;
                let mut dl = vec![F::zero(); t * v];
                for i in 0..t {
                    if !mask[i] {
                        continue;
                    }
                    for j in 0..v {
                        dl[i * v + j] = probs[i * v + j] * scale;
                    }
                    dl[i * v + targets[i]] = dl[i * v + targets[i]] - scale;
                }
                updates.push((*logits, dl));
            }
        }
        for (v, g) in updates {
            self.add_grad(v, g);
        }
        Ok(())
    }

    /// Gradient of the last `backward` call with respect to `v`, if `v`
    /// required one.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `t`'s grad buffer.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor<F>) -> Result<()> {
        match self.grad(v) {
            Some(g) => t.accumulate_grad(g),
            None if !t.requires_grad() => Ok(()),
            // Trainable but unreachable from the loss: contributes zero.
            None => t.accumulate_grad(&vec![F::zero(); t.numel()]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>, grad: bool) -> Tensor<f64> {
        let mut t = Tensor::new(shape, data).unwrap();
        t.set_requires_grad(grad);
        t
    }

    #[test]
    fn matmul_known_product() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = g.constant(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_known_rows() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(vec![2, 3], vec![0.0, 0.0, 0.0, 0.0, 2f64.ln(), f64::NEG_INFINITY]).err();
        // -inf is rejected at the boundary
        assert!(x.is_some());
        let x = g.constant(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap();
        let y = g.softmax_rows(x).unwrap();
        for &p in g.value(y) {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = g.constant(vec![1, 2], vec![0.0, 2f64.ln()]).unwrap();
        let y = g.softmax_rows(x).unwrap();
        assert!((g.value(y)[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((g.value(y)[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_stable_for_large_magnitudes() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(vec![2, 3], vec![1e4, -1e4, 9_999.0, -1e4, -1e4, -1e4]).unwrap();
        let y = g.softmax_rows(x).unwrap();
        for row in g.value(y).chunks(3) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn causal_softmax_zeroes_upper_triangle() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(vec![3, 3], (0..9).map(|v| v as f32 * 0.3).collect()).unwrap();
        let y = g.causal_softmax(x).unwrap();
        let v = g.value(y);
        assert_eq!(v[1], 0.0);
        assert_eq!(v[2], 0.0);
        assert_eq!(v[5], 0.0);
        assert_eq!(v[0], 1.0);
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(vec![2, 2], vec![1.0, 3.0, 5.0, 5.0]).unwrap();
        let gamma = g.constant(vec![2], vec![1.0, 1.0]).unwrap();
        let beta = g.constant(vec![2], vec![0.0, 0.0]).unwrap();
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        let v = g.value(y);
        assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9);
        // constant row collapses to beta
        let gamma2 = g.constant(vec![2], vec![3.0, -2.0]).unwrap();
        let beta2 = g.constant(vec![2], vec![0.25, 0.5]).unwrap();
        let y2 = g.layer_norm(x, gamma2, beta2, 1e-5).unwrap();
        assert_eq!(&g.value(y2)[2..], &[0.25, 0.5]);
        assert!(g.layer_norm(x, gamma, beta, 0.0).is_err());
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut g = Graph::<f64>::new();
        let uniform = g.constant(vec![1, 256], vec![0.0; 256]).unwrap();
        let l = g.cross_entropy(uniform, &[17], &[true]).unwrap();
        assert!((g.scalar(l) - 256f64.ln()).abs() < 1e-12);

        let masked = g.cross_entropy(uniform, &[17], &[false]).unwrap();
        assert_eq!(g.scalar(masked), 0.0);

        let peaked = g.constant(vec![1, 3], vec![10.0, 0.0, 0.0]).unwrap();
        let l = g.cross_entropy(peaked, &[0], &[true]).unwrap();
        let expected = (1.0 + 2.0 * (-10f64).exp()).ln();
        assert!((g.scalar(l) - expected).abs() < 1e-15);
        assert!((g.scalar(l) - 9.08e-5).abs() < 1e-7);

        assert!(matches!(g.cross_entropy(peaked, &[3], &[true]), Err(TensorError::Index { .. })));
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_x() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t(vec![3], vec![1.0, -2.0, 0.5], true)).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(&t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0], false)).unwrap();
        let x = g.leaf(&t(vec![1, 2], vec![1.0, 1.0], true)).unwrap();
        let y = g.matmul(x, w).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(w).is_none());
        assert_eq!(g.grad(x).unwrap(), &[3.0, 7.0]);
        let mut frozen = t(vec![2, 2], vec![0.0; 4], false);
        g.accumulate_into(w, &mut frozen).unwrap();
        assert!(frozen.grad().is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t(vec![2], vec![1.0, 2.0], true)).unwrap();
        assert!(matches!(g.backward(x), Err(TensorError::Usage(_))));
    }

    #[test]
    fn reused_node_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t(vec![1], vec![3.0], true)).unwrap();
        let y = g.add(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let s = g.sum(z).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0]);
    }
}
