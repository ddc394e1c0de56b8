//! Tape-based reverse-mode differentiation.
//!
//! Every op validates shapes, computes its value eagerly, and (when any input
//! requires a gradient) records what its backward rule needs. A graph is
//! consumed by a single call to [`Graph::backward`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::param::{Gradients, ParamId, Parameter};
use crate::scalar::Scalar;
use crate::tensor::{softmax_rows_in_place, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, b_transposed: bool },
    Add(Var, Var),
    AddRowBias { x: Var, bias: Var },
    Mul(Var, Var),
    Scale { x: Var, c: T },
    ScaleBy { x: Var, s: Var },
    Softmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { x: Var },
    Sigmoid { x: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    ConcatRows(Var, Var),
    ConcatCols(Var, Var),
    GatherRows { table: Var, ids: Vec<usize> },
    Sum { x: Var },
    Mean { x: Var },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
    param: Option<ParamId>,
}

/// Ordered record of operations since construction.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    checked: bool,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
            checked: false,
            consumed: false,
        }
    }

    /// A graph that never records backward information; every value is a
    /// constant regardless of its source.
    pub fn no_grad() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Enables non-finite detection on every op output.
    pub fn checked(mut self) -> Self {
        self.checked = true;
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded nodes that carry a backward rule.
    pub fn recorded_ops(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.requires_grad && !matches!(n.op, Op::Leaf))
            .count()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: requires_grad && self.grad_enabled,
            op: Op::Leaf,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op: if requires_grad { op } else { Op::Leaf },
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false, None)
    }

    /// Free leaf whose gradient is reported through [`Gradients::leaf`].
    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_leaf(value, requires_grad, None)
    }

    /// Places a parameter on the graph without copying its storage.
    pub fn param(&mut self, p: &Parameter<T>) -> Var {
        self.push_leaf(p.value.clone(), p.requires_grad, Some(p.id()))
    }

    /// Value-identical leaf severed from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.push_leaf(value, false, None)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, &[a, b], Op::MatMul { a, b, b_transposed: false })
    }

    /// `a @ b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        self.push("matmul_nt", out, &[a, b], Op::MatMul { a, b, b_transposed: true })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push("add", out, &[a, b], Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push("mul", out, &[a, b], Op::Mul(a, b))
    }

    /// Adds a length-`d` bias to every row of an `n x d` matrix; the only
    /// broadcast the graph supports.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let (_, d) = xv.expect_matrix("add_row_bias")?;
        if bv.numel() != d {
            return Err(Error::shape("add_row_bias", xv.shape(), bv.shape()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, &b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let out = Tensor::from_vec(xv.shape(), data)?;
        self.push("add_row_bias", out, &[x, bias], Op::AddRowBias { x, bias })
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).scale(c);
        self.push("scale", out, &[x], Op::Scale { x, c })
    }

    /// Multiplies by a one-element tensor.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            return Err(Error::shape("scale_by", self.value(x).shape(), sv.shape()));
        }
        let c = sv.data()[0];
        let out = self.value(x).scale(c);
        self.push("scale_by", out, &[x, s], Op::ScaleBy { x, s })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).softmax_rows()?;
        self.push("softmax_rows", out, &[x], Op::Softmax { x })
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = xv.expect_matrix("layer_norm")?;
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.numel() != d || bv.numel() != d {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let eps = T::cst(LAYER_NORM_EPS);
        let inv_d = T::one() / T::cst(d as f64);
        let mut xhat = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * d];
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let out = Tensor::from_vec(&[n, d], out)?;
        self.push(
            "layer_norm",
            out,
            &[x, gain, bias],
            Op::LayerNorm { x, gain, bias, xhat, rstd },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu_value);
        self.push("gelu", out, &[x], Op::Gelu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid_value);
        self.push("sigmoid", out, &[x], Op::Sigmoid { x })
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, vocab) = lv.expect_matrix("cross_entropy")?;
        if n != targets.len() || n == 0 {
            return Err(Error::shape("cross_entropy", lv.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index {
                what: "vocabulary",
                index: bad,
                size: vocab,
            });
        }
        let mut probs = lv.data().to_vec();
        let mut total = 0.0f64;
        for (r, row) in probs.chunks_mut(vocab).enumerate() {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total += (lse - row[targets[r]]).to_f64().unwrap_or(f64::NAN);
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let out = Tensor::scalar(T::cst(total / n as f64));
        self.push(
            "cross_entropy",
            out,
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ra, ca) = av.expect_matrix("concat_rows")?;
        let (rb, cb) = bv.expect_matrix("concat_rows")?;
        if ca != cb {
            return Err(Error::shape("concat_rows", av.shape(), bv.shape()));
        }
        let mut data = Vec::with_capacity((ra + rb) * ca);
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let out = Tensor::from_vec(&[ra + rb, ca], data)?;
        self.push("concat_rows", out, &[a, b], Op::ConcatRows(a, b))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ra, ca) = av.expect_matrix("concat_cols")?;
        let (rb, cb) = bv.expect_matrix("concat_cols")?;
        if ra != rb {
            return Err(Error::shape("concat_cols", av.shape(), bv.shape()));
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let out = Tensor::from_vec(&[ra, ca + cb], data)?;
        self.push("concat_cols", out, &[a, b], Op::ConcatCols(a, b))
    }

    /// Row lookup; serves both embeddings and position selection.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, d) = tv.expect_matrix("gather_rows")?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= rows {
                return Err(Error::Index {
                    what: "gather_rows",
                    index: i,
                    size: rows,
                });
            }
            data.extend_from_slice(tv.row(i));
        }
        let out = Tensor::from_vec(&[ids.len(), d], data)?;
        self.push(
            "gather_rows",
            out,
            &[table],
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, &[x], Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::scalar(xv.sum() / T::cst(xv.numel().max(1) as f64));
        self.push("mean", out, &[x], Op::Mean { x })
    }

    /// Multi-head scaled dot-product attention with an additive mask.
    ///
    /// `q: n x (h*dk)`, `k: m x (h*dk)`, `v: m x (h*dv)`, `mask: n x m` with
    /// entries `0` or `-inf`. Returns `n x (h*dv)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: &Tensor<T>, heads: usize) -> Result<Var> {
        let (out, probs) = attention_forward(self.value(q), self.value(k), self.value(v), mask, heads)?;
        self.push("attention", out, &[q, k, v], Op::Attention { q, k, v, heads, probs })
    }

    /// Reverse pass from a one-element loss. Consumes the graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        self.consumed = true;
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::shape("backward", lv.shape(), &[1]));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.backward_node(idx, &g, &mut grads)?;
        }
        let mut out = Gradients {
            by_param: HashMap::new(),
            by_leaf: HashMap::new(),
        };
        for (idx, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            if let Some(g) = grads[idx].take() {
                let t = Tensor::from_vec(node.value.shape(), g)?;
                match node.param {
                    Some(id) => {
                        // one parameter may be placed on the graph more than once
                        match out.by_param.get_mut(&id) {
                            Some(acc) => {
                                for (a, &b) in acc.data_mut().iter_mut().zip(t.data()) {
                                    *a += b;
                                }
                            }
                            None => {
                                out.by_param.insert(id, t);
                            }
                        }
                    }
                    None => {
                        out.by_leaf.insert(idx, t);
                    }
                }
            }
        }
        Ok(out)
    }

    fn backward_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_transposed } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = node.value.shape()[1];
                if self.nodes[a.0].requires_grad {
                    let da = slot(grads, *a, m * k);
                    // da += g @ b^T
                    let b_strides = if *b_transposed { (k, 1) } else { (1, n) };
                    T::gemm(m, n, k, T::one(), g, (n, 1), bv.data(), b_strides, T::one(), da, (k, 1));
                }
                if self.nodes[b.0].requires_grad {
                    let db = slot(grads, *b, k * n);
                    if *b_transposed {
                        // db (n x k) += g^T @ a
                        T::gemm(n, m, k, T::one(), g, (1, n), av.data(), (k, 1), T::one(), db, (k, 1));
                    } else {
                        // db (k x n) += a^T @ g
                        T::gemm(k, m, n, T::one(), av.data(), (1, k), g, (n, 1), T::one(), db, (n, 1));
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.nodes[v.0].requires_grad {
                        add_into(slot(grads, *v, g.len()), g);
                    }
                }
            }
            Op::AddRowBias { x, bias } => {
                if self.nodes[x.0].requires_grad {
                    add_into(slot(grads, *x, g.len()), g);
                }
                if self.nodes[bias.0].requires_grad {
                    let d = self.value(*bias).numel();
                    let db = slot(grads, *bias, d);
                    for row in g.chunks(d) {
                        add_into(db, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.nodes[a.0].requires_grad {
                    let da = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let db = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale { x, c } => {
                let dx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    dx[i] += g[i] * *c;
                }
            }
            Op::ScaleBy { x, s } => {
                let sv = self.value(*s).data()[0];
                if self.nodes[x.0].requires_grad {
                    let dx = slot(grads, *x, g.len());
                    for i in 0..g.len() {
                        dx[i] += g[i] * sv;
                    }
                }
                if self.nodes[s.0].requires_grad {
                    let xv = self.value(*x).data();
                    let total: T = g.iter().zip(xv).map(|(&a, &b)| a * b).sum();
                    slot(grads, *s, 1)[0] += total;
                }
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let cols = node.value.cols();
                let dx = slot(grads, *x, g.len());
                for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(dx.chunks_mut(cols)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..cols {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = node.value.cols();
                let gv = self.value(*gain).data();
                if self.nodes[gain.0].requires_grad {
                    let dg = slot(grads, *gain, d);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            dg[c] += gr[c] * hr[c];
                        }
                    }
                }
                if self.nodes[bias.0].requires_grad {
                    let db = slot(grads, *bias, d);
                    for gr in g.chunks(d) {
                        add_into(db, gr);
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let inv_d = T::one() / T::cst(d as f64);
                    let dx = slot(grads, *x, g.len());
                    for (r, ((gr, hr), dr)) in g
                        .chunks(d)
                        .zip(xhat.chunks(d))
                        .zip(dx.chunks_mut(d))
                        .enumerate()
                    {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for c in 0..d {
                            let dh = gr[c] * gv[c];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[c];
                        }
                        mean_dh *= inv_d;
                        mean_dh_h *= inv_d;
                        for c in 0..d {
                            let dh = gr[c] * gv[c];
                            dr[c] += rstd[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                let xv = self.value(*x).data();
                let dx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    dx[i] += g[i] * gelu_derivative(xv[i]);
                }
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                let dx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    dx[i] += g[i] * y[i] * (T::one() - y[i]);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let vocab = self.value(*logits).cols();
                let scale = g[0] / T::cst(targets.len() as f64);
                let dl = slot(grads, *logits, probs.len());
                for (r, (pr, dr)) in probs.chunks(vocab).zip(dl.chunks_mut(vocab)).enumerate() {
                    for j in 0..vocab {
                        dr[j] += pr[j] * scale;
                    }
                    dr[targets[r]] -= scale;
                }
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(*a).numel();
                if self.nodes[a.0].requires_grad {
                    add_into(slot(grads, *a, na), &g[..na]);
                }
                if self.nodes[b.0].requires_grad {
                    add_into(slot(grads, *b, g.len() - na), &g[na..]);
                }
            }
            Op::ConcatCols(a, b) => {
                let (rows, ca) = (self.value(*a).rows(), self.value(*a).cols());
                let cb = self.value(*b).cols();
                let width = ca + cb;
                if self.nodes[a.0].requires_grad {
                    let da = slot(grads, *a, rows * ca);
                    for r in 0..rows {
                        add_into(&mut da[r * ca..(r + 1) * ca], &g[r * width..r * width + ca]);
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let db = slot(grads, *b, rows * cb);
                    for r in 0..rows {
                        add_into(&mut db[r * cb..(r + 1) * cb], &g[r * width + ca..(r + 1) * width]);
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                let tv = self.value(*table);
                let d = tv.cols();
                let dt = slot(grads, *table, tv.numel());
                for (r, &i) in ids.iter().enumerate() {
                    add_into(&mut dt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
            Op::Sum { x } => {
                let n = self.value(*x).numel();
                for v in slot(grads, *x, n).iter_mut() {
                    *v += g[0];
                }
            }
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                let share = g[0] / T::cst(n as f64);
                for v in slot(grads, *x, n).iter_mut() {
                    *v += share;
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, g, grads);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, qw) = (qv.rows(), qv.cols());
        let (m, vw) = (kv.rows(), vv.cols());
        let (dk, dv) = (qw / heads, vw / heads);
        let scale = T::one() / T::cst(dk as f64).sqrt();
        let (need_q, need_k, need_v) = (
            self.nodes[q.0].requires_grad,
            self.nodes[k.0].requires_grad,
            self.nodes[v.0].requires_grad,
        );
        let mut d_attn = vec![T::zero(); n * m];
        for h in 0..heads {
            let a = &probs[h * n * m..(h + 1) * n * m];
            let g_h = &g[h * dv..];
            if need_v {
                // dV_h += A^T dO_h
                let dvv = slot(grads, v, m * vw);
                T::gemm(m, n, dv, T::one(), a, (1, m), g_h, (vw, 1), T::one(), &mut dvv[h * dv..], (vw, 1));
            }
            if !(need_q || need_k) {
                continue;
            }
            // dA = dO_h V_h^T
            T::gemm(n, dv, m, T::one(), g_h, (vw, 1), &vv.data()[h * dv..], (1, vw), T::zero(), &mut d_attn, (m, 1));
            // dS = A * (dA - rowsum(dA * A)), folded with the 1/sqrt(dk) scale
            for r in 0..n {
                let ar = &a[r * m..(r + 1) * m];
                let dr = &mut d_attn[r * m..(r + 1) * m];
                let dot: T = ar.iter().zip(dr.iter()).map(|(&x, &y)| x * y).sum();
                for j in 0..m {
                    dr[j] = ar[j] * (dr[j] - dot) * scale;
                }
            }
            if need_q {
                let dq = slot(grads, q, n * qw);
                T::gemm(n, m, dk, T::one(), &d_attn, (m, 1), &kv.data()[h * dk..], (qw, 1), T::one(), &mut dq[h * dk..], (qw, 1));
            }
            if need_k {
                let dkk = slot(grads, k, m * qw);
                T::gemm(m, n, dk, T::one(), &d_attn, (1, m), &qv.data()[h * dk..], (qw, 1), T::one(), &mut dkk[h * dk..], (qw, 1));
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice()
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn sigmoid_value<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn gelu_value<T: Scalar>(x: T) -> T {
    let c = T::cst((2.0 / std::f64::consts::PI).sqrt());
    let inner = c * (x + T::cst(0.044715) * x * x * x);
    T::cst(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_derivative<T: Scalar>(x: T) -> T {
    let c = T::cst((2.0 / std::f64::consts::PI).sqrt());
    let a = T::cst(0.044715);
    let t = (c * (x + a * x * x * x)).tanh();
    let half = T::cst(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::cst(3.0) * a * x * x)
}

/// Forward attention shared by the graph op and by inspection helpers.
/// Returns the output and the per-head attention weights `h x n x m`.
pub fn attention_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &Tensor<T>,
    heads: usize,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (n, qw) = q.expect_matrix("attention")?;
    let (m, kw) = k.expect_matrix("attention")?;
    let (mv, vw) = v.expect_matrix("attention")?;
    if heads == 0 || qw != kw || m != mv || qw % heads != 0 || vw % heads != 0 {
        return Err(Error::shape("attention", q.shape(), k.shape()));
    }
    if mask.shape() != [n, m] {
        return Err(Error::shape("attention mask", mask.shape(), &[n, m]));
    }
    let (dk, dv) = (qw / heads, vw / heads);
    let scale = T::one() / T::cst(dk as f64).sqrt();
    let mut probs = vec![T::zero(); heads * n * m];
    let mut out = vec![T::zero(); n * vw];
    for h in 0..heads {
        let a = &mut probs[h * n * m..(h + 1) * n * m];
        T::gemm(n, dk, m, scale, &q.data()[h * dk..], (qw, 1), &k.data()[h * dk..], (1, kw), T::zero(), a, (m, 1));
        for (s, &mk) in a.iter_mut().zip(mask.data()) {
            *s += mk;
        }
        softmax_rows_in_place(a, m)?;
        T::gemm(n, m, dv, T::one(), a, (m, 1), &v.data()[h * dv..], (vw, 1), T::zero(), &mut out[h * dv..], (vw, 1));
    }
    Ok((Tensor::from_vec(&[n, vw], out)?, probs))
}

/// Additive causal mask over `n` tokens, optionally preceded by `p` memory
/// columns that are either fully visible or causally aligned with tokens.
pub fn attention_mask<T: Scalar>(n: usize, memory: Option<(usize, MemoryVisibility)>) -> Tensor<T> {
    let p = memory.map(|(p, _)| p).unwrap_or(0);
    let m = p + n;
    let mut data = vec![T::zero(); n * m];
    for i in 0..n {
        for j in 0..n {
            if j > i {
                data[i * m + p + j] = T::neg_infinity();
            }
        }
        if let Some((p, MemoryVisibility::Causal)) = memory {
            for j in 0..p {
                if j > i {
                    data[i * m + j] = T::neg_infinity();
                }
            }
        }
    }
    Tensor::from_vec(&[n, m], data).expect("mask shape")
}

/// How input tokens see memory columns prepended to self-attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemoryVisibility {
    /// Every token sees every memory entry.
    Open,
    /// Token `i` sees memory entries `j <= i`.
    Causal,
}
