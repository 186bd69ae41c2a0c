//! Define-by-run tape. Every op appends a node holding its output value;
//! [`Graph::backward`] walks the tape in reverse.
//!
//! A graph is rebuilt for every step. `backward` may be called more than once
//! on the same graph: each call clears the tape's gradient buffers first, so
//! repeated calls return identical gradients. Accumulation (`+=`) happens only
//! when gradients are copied into parameter tensors via
//! [`ParamSet::accumulate_grads`](super::ParamSet::accumulate_grads).

use super::kernels::{self, gemm};
use super::{Scalar, Tensor};
use crate::error::{Result, WmError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Abs(Var),
    LogSoftmax(Var),
    CausalSoftmax(Var, F),
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: Vec<(f64, f64)> },
    Gather { table: Var, ids: Vec<usize> },
    Sum(Var),
    Mean(Var),
    MeanAxis { x: Var, axis: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape(Var),
    SwapAxes12(Var),
    CrossEntropy { logits: Var, targets: Vec<usize> },
    KlRows { p: Var, q: Var },
}

#[derive(Debug, Clone)]
struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
    requires_grad: bool,
}

#[derive(Debug, Clone)]
pub struct Graph<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new() }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<F> {
        let n = &self.nodes[v.0];
        Tensor::from_vec(n.shape.clone(), n.value.clone()).expect("graph values are validated")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, requires_grad: bool, name: &'static str) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if !kernels::all_finite(&value) {
            return Err(WmError::NonFinite { op: name });
        }
        self.nodes.push(Node { shape, value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, shape: Vec<usize>, value: Vec<F>, requires_grad: bool) -> Result<Var> {
        if numel(&shape) != value.len() || shape.is_empty() {
            return Err(WmError::shape("leaf", format!("shape {shape:?} vs {} values", value.len())));
        }
        self.push(shape, value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn leaf_ref(&mut self, t: &Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: &Tensor<F>) -> Var {
        self.leaf_ref(t, false)
    }

    /// `a[.., k] · b[k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || sa.is_empty() || sa[sa.len() - 1] != sb[0] {
            return Err(WmError::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = numel(&sa) / k;
        let mut out = vec![F::zero(); m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        self.push(shape, out, Op::MatMul(a, b), rg, "matmul")
    }

    /// Batched `a[G, m, k] · b[G, k, n]`, or `· b[G, n, k]ᵀ` with `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(WmError::shape("batch_matmul", format!("{sa:?} x {sb:?}")));
        }
        let (groups, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(WmError::shape("batch_matmul", format!("{sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let mut out = vec![F::zero(); groups * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for g in 0..groups {
                gemm(
                    m,
                    k,
                    n,
                    &av[g * m * k..(g + 1) * m * k],
                    false,
                    &bv[g * k * n..(g + 1) * k * n],
                    trans_b,
                    &mut out[g * m * n..(g + 1) * m * n],
                    false,
                );
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(vec![groups, m, n], out, Op::BatchMatMul { a, b, trans_b }, rg, "batch_matmul")
    }

    /// Elementwise sum; `b` may match `a` or a trailing suffix of its shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(WmError::shape("add", format!("{sa:?} + {sb:?}")));
        }
        let nb = numel(&sb);
        let out: Vec<F> = self
            .value(a)
            .chunks(nb)
            .flat_map(|row| row.iter().zip(self.value(b)).map(|(&x, &y)| x + y))
            .collect();
        let rg = self.rg(&[a, b]);
        self.push(sa, out, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let rg = self.rg(&[a, b]);
        self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg, "mul")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(WmError::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn scale(&mut self, a: Var, c: F) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), rg, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x + c).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::AddScalar(a), rg, "add_scalar")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| if x > F::zero() { x } else { F::zero() }).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Relu(a), rg, "relu")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x.tanh()).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Tanh(a), rg, "tanh")
    }

    /// `|x|`; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x.abs()).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Abs(a), rg, "abs")
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let v = *shape.last().unwrap();
        let mut out = vec![F::zero(); self.value(a).len()];
        for (o, x) in out.chunks_mut(v).zip(self.value(a).chunks(v)) {
            kernels::log_softmax_row(x, o);
        }
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::LogSoftmax(a), rg, "log_softmax")
    }

    /// Softmax of `scale · x` over the last axis of `[.., T, T]` scores, with
    /// entries above the diagonal masked out (they come out as exact zeros).
    pub fn causal_softmax(&mut self, a: Var, scale: F) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let t = shape[shape.len() - 1];
        if shape.len() < 2 || shape[shape.len() - 2] != t {
            return Err(WmError::shape("causal_softmax", format!("{shape:?} is not [.., T, T]")));
        }
        let mut out = vec![F::zero(); self.value(a).len()];
        for (o, x) in out.chunks_mut(t * t).zip(self.value(a).chunks(t * t)) {
            causal_softmax_block(x, o, t, scale);
        }
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::CausalSoftmax(a, scale), rg, "causal_softmax")
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(WmError::shape("layer_norm", format!("{shape:?} with gain {:?}", self.shape(gamma))));
        }
        let mut out = vec![F::zero(); self.value(x).len()];
        let mut stats = Vec::with_capacity(out.len() / d);
        for (o, row) in out.chunks_mut(d).zip(self.value(x).chunks(d)) {
            stats.push(kernels::layer_norm_row(row, self.value(gamma), self.value(beta), o));
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(shape, out, Op::LayerNorm { x, gamma, beta, stats }, rg, "layer_norm")
    }

    /// Row lookup into a 2-D table: `out[i] = table[ids[i]]`; gradients
    /// scatter-add back into the table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(WmError::shape("gather_rows", format!("table shape {ts:?}")));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= ts[0]) {
            return Err(WmError::shape("gather_rows", format!("row {bad} of {}", ts[0])));
        }
        if ids.is_empty() {
            return Err(WmError::shape("gather_rows", "no rows selected"));
        }
        let d = ts[1];
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        self.push(vec![ids.len(), d], out, Op::Gather { table, ids: ids.to_vec() }, rg, "gather_rows")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).iter().map(|v| v.f64()).sum();
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![F::of(s)], Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s: f64 = self.value(a).iter().map(|v| v.f64()).sum();
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![F::of(s / n)], Op::Mean(a), rg, "mean")
    }

    /// Mean of a 2-D node along `axis` (0: over rows, 1: over columns).
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || axis > 1 {
            return Err(WmError::shape("mean_axis", format!("{s:?} axis {axis}")));
        }
        let (r, c) = (s[0], s[1]);
        let x = self.value(a);
        let out: Vec<F> = if axis == 1 {
            x.chunks(c).map(|row| F::of(row.iter().map(|v| v.f64()).sum::<f64>() / c as f64)).collect()
        } else {
            let mut acc = vec![0.0f64; c];
            for row in x.chunks(c) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v.f64();
                }
            }
            acc.into_iter().map(|v| F::of(v / r as f64)).collect()
        };
        let shape = vec![if axis == 1 { r } else { c }];
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::MeanAxis { x: a, axis }, rg, "mean_axis")
    }

    /// Concatenates nodes along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| WmError::shape("concat", "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(WmError::shape("concat", format!("axis {axis} for {s0:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != s0.len() || s.iter().zip(&s0).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(WmError::shape("concat", format!("{s:?} vs {s0:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = s0[..axis].iter().product();
        let mut out = Vec::new();
        for o in 0..outer {
            for &v in inputs {
                let inner: usize = self.shape(v)[axis..].iter().product();
                out.extend_from_slice(&self.value(v)[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let rg = self.rg(inputs);
        self.push(shape, out, Op::Concat { inputs: inputs.to_vec(), axis }, rg, "concat")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(WmError::shape("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape.to_vec(), value, Op::Reshape(a), rg, "reshape")
    }

    /// `[a, b, c, d] -> [a, c, b, d]`.
    pub fn swap_axes12(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(WmError::shape("swap_axes12", format!("{s:?}")));
        }
        let out = swap12(self.value(a), s[0], s[1], s[2], s[3]);
        let rg = self.rg(&[a]);
        self.push(vec![s[0], s[2], s[1], s[3]], out, Op::SwapAxes12(a), rg, "swap_axes12")
    }

    /// Mean over rows of `-log_softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let v = *s.last().unwrap();
        let rows = numel(&s) / v;
        if targets.len() != rows {
            return Err(WmError::shape("cross_entropy", format!("{rows} rows, {} targets", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(WmError::TokenOutOfRange { id: bad as u32, vocab: v });
        }
        let mut buf = vec![F::zero(); v];
        let mut total = 0.0;
        for (row, &t) in self.value(logits).chunks(v).zip(targets) {
            kernels::log_softmax_row(row, &mut buf);
            total -= buf[t].f64();
        }
        let rg = self.rg(&[logits]);
        self.push(
            vec![1],
            vec![F::of(total / rows as f64)],
            Op::CrossEntropy { logits, targets: targets.to_vec() },
            rg,
            "cross_entropy",
        )
    }

    /// Per-row `KL(softmax(p) ‖ softmax(q))` over the last axis, shape `[rows]`.
    pub fn kl_rows(&mut self, p: Var, q: Var) -> Result<Var> {
        self.same_shape("kl_rows", p, q)?;
        let s = self.shape(p).to_vec();
        let v = *s.last().unwrap();
        let mut lp = vec![F::zero(); v];
        let mut lq = vec![F::zero(); v];
        let out: Vec<F> = self
            .value(p)
            .chunks(v)
            .zip(self.value(q).chunks(v))
            .map(|(pr, qr)| {
                kernels::log_softmax_row(pr, &mut lp);
                kernels::log_softmax_row(qr, &mut lq);
                let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.f64().exp() * (a.f64() - b.f64())).sum();
                F::of(kl.max(0.0))
            })
            .collect();
        let rg = self.rg(&[p, q]);
        let rows = out.len();
        self.push(vec![rows], out, Op::KlRows { p, q }, rg, "kl_rows")
    }

    /// Smallest `|input|` over every ReLU and abs node; `None` without any.
    /// Finite-difference checks use it to stay clear of kinks.
    pub fn min_kink_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) | Op::Abs(a) => {
                    Some(self.nodes[a.0].value.iter().map(|v| v.f64().abs()).fold(f64::INFINITY, f64::min))
                }
                _ => None,
            })
            .reduce(f64::min)
    }

    /// Reverse pass from a scalar `loss`. Clears previous tape gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(WmError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = self.grads[i].take() else { continue };
            self.backprop_node(i, &gout);
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, gout: &[F]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let rg = |v: Var| nodes[v.0].requires_grad;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let sb = nodes[(b).0].shape.to_vec();
                let (k, n) = (sb[0], sb[1]);
                let m = nodes[a.0].value.len() / k;
                if rg(a) {
                    let bv = &nodes[b.0].value;
                    let ga = acc(nodes, grads, a).unwrap();
                    gemm(m, n, k, gout, false, bv, true, ga, true);
                }
                if rg(b) {
                    let av = &nodes[a.0].value;
                    let gb = acc(nodes, grads, b).unwrap();
                    gemm(k, m, n, av, true, gout, false, gb, true);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (a, b, trans_b) = (*a, *b, *trans_b);
                let sa = nodes[(a).0].shape.to_vec();
                let (groups, m, k) = (sa[0], sa[1], sa[2]);
                let n = gout.len() / (groups * m);
                if rg(a) {
                    let bv = &nodes[b.0].value;
                    let ga = acc(nodes, grads, a).unwrap();
                    for g in 0..groups {
                        gemm(
                            m,
                            n,
                            k,
                            &gout[g * m * n..(g + 1) * m * n],
                            false,
                            &bv[g * k * n..(g + 1) * k * n],
                            !trans_b,
                            &mut ga[g * m * k..(g + 1) * m * k],
                            true,
                        );
                    }
                }
                if rg(b) {
                    let av = &nodes[a.0].value;
                    let gb = acc(nodes, grads, b).unwrap();
                    for g in 0..groups {
                        let (ag, cg) = (&av[g * m * k..(g + 1) * m * k], &gout[g * m * n..(g + 1) * m * n]);
                        let out = &mut gb[g * k * n..(g + 1) * k * n];
                        if trans_b {
                            gemm(n, m, k, cg, true, ag, false, out, true);
                        } else {
                            gemm(k, m, n, ag, true, cg, false, out, true);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                if let Some(ga) = acc(nodes, grads, a) {
                    ga.iter_mut().zip(gout).for_each(|(x, &g)| *x = *x + g);
                }
                if let Some(gb) = acc(nodes, grads, b) {
                    let nb = gb.len();
                    for row in gout.chunks(nb) {
                        gb.iter_mut().zip(row).for_each(|(x, &g)| *x = *x + g);
                    }
                }
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                if let Some(ga) = acc(nodes, grads, a) {
                    ga.iter_mut().zip(gout).for_each(|(x, &g)| *x = *x + g);
                }
                if let Some(gb) = acc(nodes, grads, b) {
                    gb.iter_mut().zip(gout).for_each(|(x, &g)| *x = *x - g);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if rg(a) {
                    let bv = &nodes[b.0].value;
                    let ga = acc(nodes, grads, a).unwrap();
                    for ((x, &g), &y) in ga.iter_mut().zip(gout).zip(bv.iter()) {
                        *x = *x + g * y;
                    }
                }
                if rg(b) {
                    let av = &nodes[a.0].value;
                    let gb = acc(nodes, grads, b).unwrap();
                    for ((x, &g), &y) in gb.iter_mut().zip(gout).zip(av.iter()) {
                        *x = *x + g * y;
                    }
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                if let Some(ga) = acc(nodes, grads, *a) {
                    ga.iter_mut().zip(gout).for_each(|(x, &g)| *x = *x + g * c);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    ga.iter_mut().zip(gout).for_each(|(x, &g)| *x = *x + g);
                }
            }
            Op::Relu(a) => {
                let a = *a;
                let xv = &nodes[a.0].value;
                if let Some(ga) = acc(nodes, grads, a) {
                    for ((x, &g), &v) in ga.iter_mut().zip(gout).zip(xv.iter()) {
                        if v > F::zero() {
                            *x = *x + g;
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                let a = *a;
                let yv = &nodes[i].value;
                if let Some(ga) = acc(nodes, grads, a) {
                    for ((x, &g), &y) in ga.iter_mut().zip(gout).zip(yv.iter()) {
                        *x = *x + g * (F::one() - y * y);
                    }
                }
            }
            Op::Abs(a) => {
                let a = *a;
                let xv = &nodes[a.0].value;
                if let Some(ga) = acc(nodes, grads, a) {
                    for ((x, &g), &v) in ga.iter_mut().zip(gout).zip(xv.iter()) {
                        if v > F::zero() {
                            *x = *x + g;
                        } else if v < F::zero() {
                            *x = *x - g;
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let a = *a;
                let v = *nodes[i].shape.last().unwrap();
                let yv = &nodes[i].value;
                if let Some(ga) = acc(nodes, grads, a) {
                    for ((gx, gy), y) in ga.chunks_mut(v).zip(gout.chunks(v)).zip(yv.chunks(v)) {
                        let s: f64 = gy.iter().map(|g| g.f64()).sum();
                        for j in 0..v {
                            gx[j] = gx[j] + F::of(gy[j].f64() - y[j].f64().exp() * s);
                        }
                    }
                }
            }
            Op::CausalSoftmax(a, scale) => {
                let (a, scale) = (*a, *scale);
                let t = *nodes[i].shape.last().unwrap();
                let yv = &nodes[i].value;
                if let Some(ga) = acc(nodes, grads, a) {
                    for ((gx, gy), y) in ga.chunks_mut(t).zip(gout.chunks(t)).zip(yv.chunks(t)) {
                        let dot: f64 = gy.iter().zip(y).map(|(g, y)| g.f64() * y.f64()).sum();
                        for j in 0..t {
                            let yj = y[j].f64();
                            if yj != 0.0 {
                                gx[j] = gx[j] + F::of(scale.f64() * yj * (gy[j].f64() - dot));
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let d = nodes[gamma.0].value.len();
                let xv = &nodes[x.0].value;
                let gv = &nodes[gamma.0].value;
                let xhat = |r: usize, j: usize| (xv[r * d + j].f64() - stats[r].0) * stats[r].1;
                if rg(x) {
                    let gx = acc(nodes, grads, x).unwrap();
                    for (r, &(_, rstd)) in stats.iter().enumerate() {
                        let gy = &gout[r * d..(r + 1) * d];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..d {
                            let dxh = gy[j].f64() * gv[j].f64();
                            mean_d += dxh;
                            mean_dx += dxh * xhat(r, j);
                        }
                        mean_d /= d as f64;
                        mean_dx /= d as f64;
                        for j in 0..d {
                            let dxh = gy[j].f64() * gv[j].f64();
                            let v = rstd * (dxh - mean_d - xhat(r, j) * mean_dx);
                            gx[r * d + j] = gx[r * d + j] + F::of(v);
                        }
                    }
                }
                if rg(gamma) {
                    let mut sums = vec![0.0f64; d];
                    for r in 0..stats.len() {
                        for j in 0..d {
                            sums[j] += gout[r * d + j].f64() * xhat(r, j);
                        }
                    }
                    let gg = acc(nodes, grads, gamma).unwrap();
                    gg.iter_mut().zip(&sums).for_each(|(g, &a)| *g = *g + F::of(a));
                }
                if rg(beta) {
                    let mut sums = vec![0.0f64; d];
                    for row in gout.chunks(d) {
                        sums.iter_mut().zip(row).for_each(|(a, g)| *a += g.f64());
                    }
                    let gb = acc(nodes, grads, beta).unwrap();
                    gb.iter_mut().zip(&sums).for_each(|(g, &a)| *g = *g + F::of(a));
                }
            }
            Op::Gather { table, ids } => {
                let d = nodes[table.0].shape[1];
                if let Some(gt) = acc(nodes, grads, *table) {
                    for (row, &id) in gout.chunks(d).zip(ids) {
                        for (g, &v) in gt[id * d..(id + 1) * d].iter_mut().zip(row) {
                            *g = *g + v;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let g0 = gout[0];
                if let Some(ga) = acc(nodes, grads, *a) {
                    ga.iter_mut().for_each(|x| *x = *x + g0);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    let g0 = F::of(gout[0].f64() / ga.len() as f64);
                    ga.iter_mut().for_each(|x| *x = *x + g0);
                }
            }
            Op::MeanAxis { x, axis } => {
                let s = nodes[x.0].shape.to_vec();
                let (r, c) = (s[0], s[1]);
                let axis = *axis;
                if let Some(ga) = acc(nodes, grads, *x) {
                    for ri in 0..r {
                        for ci in 0..c {
                            let g = if axis == 1 {
                                gout[ri].f64() / c as f64
                            } else {
                                gout[ci].f64() / r as f64
                            };
                            ga[ri * c + ci] = ga[ri * c + ci] + F::of(g);
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let axis = *axis;
                let outer: usize = nodes[i].shape[..axis].iter().product();
                let mut offset = 0;
                let total_inner: usize = nodes[i].shape[axis..].iter().product();
                for &v in inputs {
                    let inner: usize = nodes[(v).0].shape[axis..].iter().product();
                    if let Some(gv) = acc(nodes, grads, v) {
                        for o in 0..outer {
                            let src = &gout[o * total_inner + offset..o * total_inner + offset + inner];
                            for (g, &s) in gv[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                                *g = *g + s;
                            }
                        }
                    }
                    offset += inner;
                }
            }
            Op::SwapAxes12(a) => {
                let s = nodes[i].shape.clone();
                let back = swap12(gout, s[0], s[1], s[2], s[3]);
                if let Some(ga) = acc(nodes, grads, *a) {
                    ga.iter_mut().zip(&back).for_each(|(x, &g)| *x = *x + g);
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let logits = *logits;
                let v = *nodes[(logits).0].shape.last().unwrap();
                let rows = targets.len();
                let scale = gout[0].f64() / rows as f64;
                let lv = &nodes[logits.0].value;
                if let Some(gl) = acc(nodes, grads, logits) {
                    let mut p = vec![0.0f64; v];
                    for ((g, row), &t) in gl.chunks_mut(v).zip(lv.chunks(v)).zip(targets) {
                        kernels::softmax_row_f64(row, &mut p);
                        for j in 0..v {
                            let d = p[j] - if j == t { 1.0 } else { 0.0 };
                            g[j] = g[j] + F::of(scale * d);
                        }
                    }
                }
            }
            Op::KlRows { p, q } => {
                let (p, q) = (*p, *q);
                let v = *nodes[(p).0].shape.last().unwrap();
                let pv = &nodes[p.0].value;
                let qv = &nodes[q.0].value;
                let kls = &nodes[i].value;
                let rows = kls.len();
                let mut sp = vec![0.0f64; v];
                let mut sq = vec![0.0f64; v];
                let mut dp = vec![F::zero(); pv.len()];
                let mut dq = vec![F::zero(); qv.len()];
                for r in 0..rows {
                    let (pr, qr) = (&pv[r * v..(r + 1) * v], &qv[r * v..(r + 1) * v]);
                    kernels::softmax_row_f64(pr, &mut sp);
                    kernels::softmax_row_f64(qr, &mut sq);
                    let g = gout[r].f64();
                    let kl = kls[r].f64();
                    for j in 0..v {
                        let lr = sp[j].max(f64::MIN_POSITIVE).ln() - sq[j].max(f64::MIN_POSITIVE).ln();
                        dp[r * v + j] = F::of(g * sp[j] * (lr - kl));
                        dq[r * v + j] = F::of(g * (sq[j] - sp[j]));
                    }
                }
                if let Some(gp) = acc(nodes, grads, p) {
                    gp.iter_mut().zip(&dp).for_each(|(x, &d)| *x = *x + d);
                }
                if let Some(gq) = acc(nodes, grads, q) {
                    gq.iter_mut().zip(&dq).for_each(|(x, &d)| *x = *x + d);
                }
            }
        }
    }
}

fn acc<'a, F: Scalar>(nodes: &[Node<F>], grads: &'a mut [Option<Vec<F>>], v: Var) -> Option<&'a mut Vec<F>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
}

/// Masked softmax of one `[t, t]` score block.
pub(crate) fn causal_softmax_block<F: Scalar>(x: &[F], out: &mut [F], t: usize, scale: F) {
    for r in 0..t {
        let row = &x[r * t..r * t + r + 1];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max((v * scale).f64()));
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = ((v * scale).f64() - max).exp();
            out[r * t + j] = F::of(e);
            sum += e;
        }
        for j in 0..=r {
            out[r * t + j] = F::of(out[r * t + j].f64() / sum);
        }
        for j in r + 1..t {
            out[r * t + j] = F::zero();
        }
    }
}

fn swap12<F: Copy>(x: &[F], a: usize, b: usize, c: usize, d: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(x.len());
    for ai in 0..a {
        for ci in 0..c {
            for bi in 0..b {
                let base = ((ai * b + bi) * c + ci) * d;
                out.extend_from_slice(&x[base..base + d]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph<f64>, shape: &[usize], v: &[f64]) -> Var {
        g.leaf(shape.to_vec(), v.to_vec(), true).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::<f64>::new();
        let a = leaf(&mut g, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut g, &[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[19.0, 22.0, 43.0, 50.0]);

        let eye = leaf(&mut g, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let c = g.matmul(eye, b).unwrap();
        assert_eq!(g.value(c), g.value(b));

        let z = leaf(&mut g, &[2, 2], &[0.0; 4]);
        let c = g.matmul(z, b).unwrap();
        assert_eq!(g.value(c), &[0.0; 4]);

        let bad = leaf(&mut g, &[3, 1], &[1.0; 3]);
        assert!(matches!(g.matmul(a, bad), Err(WmError::Shape { .. })));
    }

    #[test]
    fn matmul_backward_matches_transposed_products() {
        let mut g = Graph::<f64>::new();
        let a = leaf(&mut g, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut g, &[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c).unwrap();
        g.backward(s).unwrap();
        // dA = 1·Bᵀ, dB = Aᵀ·1
        assert_eq!(g.grad(a).unwrap(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(g.grad(b).unwrap(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, &[3], &[1.0, -2.0, 0.5]);
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
        // backward twice gives identical values
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, &[2], &[1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(WmError::NonScalarLoss(_))));
    }

    #[test]
    fn log_softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, &[4], &[0.3; 4]);
        let y = g.log_softmax(x).unwrap();
        for &v in g.value(y) {
            assert!((v + 4f64.ln()).abs() < 1e-12);
        }
        let a = leaf(&mut g, &[3], &[0.1, -2.0, 5.0]);
        let b = leaf(&mut g, &[3], &[7.1, 5.0, 12.0]);
        let (ya, yb) = (g.log_softmax(a).unwrap(), g.log_softmax(b).unwrap());
        for (p, q) in g.value(ya).iter().zip(g.value(yb)) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, &[1], &[1e300]);
        let y = g.mul(x, x);
        assert!(matches!(y, Err(WmError::NonFinite { op: "mul" })));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, &[1, 5], &[0.0; 5]);
        let ce = g.cross_entropy(x, &[3]).unwrap();
        assert!((g.scalar(ce) - 5f64.ln()).abs() < 1e-12);

        let x = leaf(&mut g, &[1, 2], &[0.0, 3f64.ln()]);
        let ce = g.cross_entropy(x, &[1]).unwrap();
        assert!((g.scalar(ce) - (4.0f64 / 3.0).ln()).abs() < 1e-12);

        let x = leaf(&mut g, &[1, 3], &[0.0, 60.0, 0.0]);
        let ce = g.cross_entropy(x, &[1]).unwrap();
        assert!(g.scalar(ce) < 1e-20);

        assert!(matches!(g.cross_entropy(x, &[3]), Err(WmError::TokenOutOfRange { .. })));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, &[1, 3, 3], &[1.0, 9.0, 9.0, 0.0, 0.0, 9.0, 1.0, 2.0, 3.0]);
        let y = g.causal_softmax(x, 1.0).unwrap();
        let v = g.value(y);
        assert_eq!(v[0], 1.0);
        assert_eq!(&v[1..3], &[0.0, 0.0]);
        assert!((v[3] - 0.5).abs() < 1e-15 && v[5] == 0.0);
        assert!((v[6..9].iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn concat_and_swap_layouts() {
        let mut g = Graph::<f64>::new();
        let a = leaf(&mut g, &[2, 1], &[1.0, 2.0]);
        let b = leaf(&mut g, &[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let d = g.concat(&[b, b], 0).unwrap();
        assert_eq!(g.shape(d), &[4, 2]);

        let x = leaf(&mut g, &[1, 2, 3, 1], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let y = g.swap_axes12(x).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 2, 1]);
        assert_eq!(g.value(y), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }
}
