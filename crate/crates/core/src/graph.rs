//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in construction order. Because each
//! node only refers to earlier nodes, construction order is a topological
//! order and [`Graph::backward`] is a single reverse sweep.
//!
//! Leaf gradients accumulate across repeated `backward` calls; interior
//! gradients are recomputed from scratch each time.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Square(Var),
    Silu(Var),
    Softplus(Var),
    Recip(Var),
    Softmax { x: Var, outer: usize, n: usize, inner: usize },
    LogSoftmaxPick { logits: Var, targets: Vec<usize> },
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    ScaleRows { x: Var, w: Var },
    GatherRows { x: Var, rows: Vec<usize> },
    ScatterRows { x: Var, rows: Vec<usize> },
    Pick { x: Var, idx: Vec<usize> },
    SegmentSum { x: Var, offsets: Vec<usize> },
    CausalMean { x: Var, offsets: Vec<usize> },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Square(_) => "square",
            Op::Silu(_) => "silu",
            Op::Softplus(_) => "softplus",
            Op::Recip(_) => "recip",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmaxPick { .. } => "log_softmax_pick",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::RowSum(_) => "row_sum",
            Op::ScaleRows { .. } => "scale_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::Pick { .. } => "pick",
            Op::SegmentSum { .. } => "segment_sum",
            Op::CausalMean { .. } => "causal_mean",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
    needs_grad: bool,
}

/// Computation record for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
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

    /// Registers a tensor as an input; it receives a gradient iff its
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, tensor: Tensor<S>) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push_unchecked(Op::Leaf, tensor, needs_grad)
    }

    /// An input that always receives a gradient.
    pub fn param(&mut self, mut tensor: Tensor<S>) -> Var {
        tensor.set_requires_grad(true);
        self.leaf(tensor)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor<S>) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated on `v` by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads[v.0].as_deref()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push_unchecked(&mut self, op: Op<S>, value: Tensor<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op<S>, shape: Vec<usize>, data: Vec<S>, inputs: &[Var]) -> Result<Var> {
        let name = op.name();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let value = Tensor::new(shape, data)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_unchecked(op, value, needs_grad))
    }

    fn data(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape(op, other, &[0, 0])),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![S::zero(); m * n];
        matmul_into(self.data(a), self.data(b), &mut out, m, k, n);
        self.push(Op::MatMul(a, b), vec![m, n], out, &[a, b])
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<S>, f: impl Fn(S, S) -> S) -> Result<Var> {
        let shape = self.same_shape(a, b, op.name())?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(op, shape, data, &[a, b])
    }

    fn map(&mut self, x: Var, op: Op<S>, f: impl Fn(S) -> S) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        self.push(op, shape, data, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -S::one())
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Square(x), |v| v * v)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Silu(x), |v| v * v.sigmoid())
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Softplus(x), Scalar::softplus)
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Recip(x), |v| S::one() / v)
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index {
                what: "softmax axis",
                index: axis,
                bound: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(x);
        if src.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("softmax"));
        }
        let mut out = vec![S::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(S::neg_infinity(), S::max);
                let mut total = S::zero();
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total = total + e;
                }
                for j in 0..n {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        self.push(Op::Softmax { x, outer, n, inner }, shape, out, &[x])
    }

    /// Row-wise `log softmax(logits)[t, targets[t]]`, shape `[T]`.
    pub fn log_softmax_pick(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, vocab) = self.dims2(logits, "log_softmax_pick")?;
        if targets.len() != rows {
            return Err(Error::shape("log_softmax_pick", &[rows, vocab], &[targets.len()]));
        }
        let src = self.data(logits);
        let mut out = Vec::with_capacity(rows);
        for (t, &y) in targets.iter().enumerate() {
            if y >= vocab {
                return Err(Error::Index {
                    what: "target class",
                    index: y,
                    bound: vocab,
                });
            }
            let row = &src[t * vocab..(t + 1) * vocab];
            out.push(row[y] - log_sum_exp(row));
        }
        self.push(
            Op::LogSoftmaxPick {
                logits,
                targets: targets.to_vec(),
            },
            vec![rows],
            out,
            &[logits],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.data(x).iter().copied().sum();
        self.push(Op::Sum(x), Vec::new(), vec![total], &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let src = self.data(x);
        let total: S = src.iter().copied().sum();
        let m = total / S::from_usize_lossy(src.len());
        self.push(Op::Mean(x), Vec::new(), vec![m], &[x])
    }

    /// `[T, N] -> [T]` sum over the last axis.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "row_sum")?;
        let src = self.data(x);
        let out = (0..rows)
            .map(|r| src[r * cols..(r + 1) * cols].iter().copied().sum())
            .collect();
        self.push(Op::RowSum(x), vec![rows], out, &[x])
    }

    /// Multiplies row `t` of `x: [T, d]` by `w[t]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "scale_rows")?;
        if self.shape(w) != [rows] {
            return Err(Error::shape("scale_rows", self.shape(x), self.shape(w)));
        }
        let (src, ws) = (self.data(x), self.data(w));
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            out.extend(src[r * cols..(r + 1) * cols].iter().map(|&v| v * ws[r]));
        }
        self.push(Op::ScaleRows { x, w }, vec![rows, cols], out, &[x, w])
    }

    /// Output row `r` is input row `rows[r]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, cols) = self.dims2(x, "gather_rows")?;
        let src = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n {
                return Err(Error::Index {
                    what: "row",
                    index: r,
                    bound: n,
                });
            }
            out.extend_from_slice(&src[r * cols..(r + 1) * cols]);
        }
        if rows.is_empty() {
            return Err(Error::Empty("gather_rows"));
        }
        self.push(
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            vec![rows.len(), cols],
            out,
            &[x],
        )
    }

    /// Adds input row `r` into output row `rows[r]` of a zero `[out_rows, d]` matrix.
    pub fn scatter_rows(&mut self, x: Var, rows: &[usize], out_rows: usize) -> Result<Var> {
        let (n, cols) = self.dims2(x, "scatter_rows")?;
        if rows.len() != n {
            return Err(Error::shape("scatter_rows", &[n, cols], &[rows.len()]));
        }
        let src = self.data(x);
        let mut out = vec![S::zero(); out_rows * cols];
        for (r, &dst) in rows.iter().enumerate() {
            if dst >= out_rows {
                return Err(Error::Index {
                    what: "row",
                    index: dst,
                    bound: out_rows,
                });
            }
            for c in 0..cols {
                out[dst * cols + c] = out[dst * cols + c] + src[r * cols + c];
            }
        }
        self.push(
            Op::ScatterRows {
                x,
                rows: rows.to_vec(),
            },
            vec![out_rows, cols],
            out,
            &[x],
        )
    }

    /// Gathers flat (row-major) entries into a vector.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let src = self.data(x);
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= src.len() {
                return Err(Error::Index {
                    what: "element",
                    index: i,
                    bound: src.len(),
                });
            }
            out.push(src[i]);
        }
        if idx.is_empty() {
            return Err(Error::Empty("pick"));
        }
        self.push(
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
            vec![idx.len()],
            out,
            &[x],
        )
    }

    /// Sums a `[T]` vector over contiguous segments `offsets[z]..offsets[z+1]`.
    pub fn segment_sum(&mut self, x: Var, offsets: &[usize]) -> Result<Var> {
        let n = self.data(x).len();
        check_offsets(offsets, n, "segment_sum")?;
        let src = self.data(x);
        let out = offsets
            .windows(2)
            .map(|w| src[w[0]..w[1]].iter().copied().sum())
            .collect::<Vec<S>>();
        let len = out.len();
        self.push(
            Op::SegmentSum {
                x,
                offsets: offsets.to_vec(),
            },
            vec![len],
            out,
            &[x],
        )
    }

    /// Running mean of rows within each segment: output row `t` is the mean of
    /// input rows `start(t)..=t`.
    pub fn causal_mean(&mut self, x: Var, offsets: &[usize]) -> Result<Var> {
        let (n, cols) = self.dims2(x, "causal_mean")?;
        check_offsets(offsets, n, "causal_mean")?;
        let src = self.data(x);
        let mut out = vec![S::zero(); n * cols];
        let mut acc = vec![S::zero(); cols];
        for w in offsets.windows(2) {
            acc.iter_mut().for_each(|a| *a = S::zero());
            for t in w[0]..w[1] {
                let inv = S::one() / S::from_usize_lossy(t - w[0] + 1);
                for c in 0..cols {
                    acc[c] = acc[c] + src[t * cols + c];
                    out[t * cols + c] = acc[c] * inv;
                }
            }
        }
        self.push(
            Op::CausalMean {
                x,
                offsets: offsets.to_vec(),
            },
            vec![n, cols],
            out,
            &[x],
        )
    }

    /// Mean over rows of `-log softmax(logits)[t, target_t]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        if targets.is_empty() {
            return Err(Error::Empty("cross_entropy targets"));
        }
        let lp = self.log_softmax_pick(logits, targets)?;
        let m = self.mean(lp)?;
        self.neg(m)
    }

    /// Mean squared elementwise difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_shape = self.shape(loss);
        if self.nodes[loss.0].value.numel() != 1 || loss_shape.len() > 1 {
            return Err(Error::NonScalarLoss(loss_shape.to_vec()));
        }
        if !self.nodes[loss.0].value.item().is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *grad = None;
            }
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].needs_grad {
                continue;
            }
            let Some(upstream) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &upstream);
            self.grads[i] = Some(upstream);
        }
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Leaf, Some(g)) = (&node.op, grad) {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("backward"));
                }
            }
        }
        Ok(())
    }

    /// Returns a gradient buffer for `v` if it participates in differentiation.
    fn grad_buf(&mut self, v: Var) -> Option<&mut Vec<S>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![S::zero(); n]))
    }

    fn propagate(&mut self, i: usize, up: &[S]) {
        // Ops hold only earlier node ids, so cloning the op decouples the
        // borrow of `nodes` from the gradient buffers.
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(self.shape(a));
                let n = self.shape(b)[1];
                if self.nodes[a.0].needs_grad {
                    let bd = self.data(b).to_vec();
                    let ga = self.grad_buf(a).expect("needs grad");
                    // dA = dC . B^T
                    for r in 0..m {
                        for p in 0..k {
                            let mut acc = S::zero();
                            for c in 0..n {
                                acc = acc + up[r * n + c] * bd[p * n + c];
                            }
                            ga[r * k + p] = ga[r * k + p] + acc;
                        }
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let ad = self.data(a).to_vec();
                    let gb = self.grad_buf(b).expect("needs grad");
                    // dB = A^T . dC
                    for r in 0..m {
                        for p in 0..k {
                            let av = ad[r * k + p];
                            if av == S::zero() {
                                continue;
                            }
                            let row = &up[r * n..(r + 1) * n];
                            let dst = &mut gb[p * n..(p + 1) * n];
                            for (d, &u) in dst.iter_mut().zip(row) {
                                *d = *d + av * u;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc_map(a, up, |_, u| u);
                self.acc_map(b, up, |_, u| u);
            }
            Op::Sub(a, b) => {
                self.acc_map(a, up, |_, u| u);
                self.acc_map(b, up, |_, u| -u);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(a).to_vec(), self.data(b).to_vec());
                self.acc_map(a, up, |j, u| u * bd[j]);
                self.acc_map(b, up, |j, u| u * ad[j]);
            }
            Op::Scale(x, c) => self.acc_map(x, up, |_, u| u * c),
            Op::Square(x) => {
                let xd = self.data(x).to_vec();
                let two = S::from_f64_lossy(2.0);
                self.acc_map(x, up, |j, u| u * two * xd[j]);
            }
            Op::Silu(x) => {
                let xd = self.data(x).to_vec();
                self.acc_map(x, up, |j, u| {
                    let s = xd[j].sigmoid();
                    u * s * (S::one() + xd[j] * (S::one() - s))
                });
            }
            Op::Softplus(x) => {
                let xd = self.data(x).to_vec();
                self.acc_map(x, up, |j, u| u * xd[j].sigmoid());
            }
            Op::Recip(x) => {
                let y = self.nodes[i].value.data().to_vec();
                self.acc_map(x, up, |j, u| -u * y[j] * y[j]);
            }
            Op::Softmax { x, outer, n, inner } => {
                let y = self.nodes[i].value.data().to_vec();
                let Some(gx) = self.grad_buf(x) else { return };
                for o in 0..outer {
                    for c in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + c;
                        let dot: S = (0..n).map(|j| y[at(j)] * up[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = gx[at(j)] + y[at(j)] * (up[at(j)] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxPick { logits, targets } => {
                let vocab = self.shape(logits)[1];
                let src = self.data(logits).to_vec();
                let Some(g) = self.grad_buf(logits) else { return };
                for (t, &y) in targets.iter().enumerate() {
                    let row = &src[t * vocab..(t + 1) * vocab];
                    let lse = log_sum_exp(row);
                    for j in 0..vocab {
                        let p = (row[j] - lse).exp();
                        let ind = if j == y { S::one() } else { S::zero() };
                        g[t * vocab + j] = g[t * vocab + j] + up[t] * (ind - p);
                    }
                }
            }
            Op::Sum(x) => self.acc_map(x, up, |_, _| up[0]),
            Op::Mean(x) => {
                let n = S::from_usize_lossy(self.nodes[x.0].value.numel());
                self.acc_map(x, up, |_, _| up[0] / n);
            }
            Op::RowSum(x) => {
                let cols = self.shape(x)[1];
                self.acc_map(x, up, |j, _| up[j / cols]);
            }
            Op::ScaleRows { x, w } => {
                let cols = self.shape(x)[1];
                let (xd, wd) = (self.data(x).to_vec(), self.data(w).to_vec());
                self.acc_map(x, up, |j, u| u * wd[j / cols]);
                if let Some(gw) = self.grad_buf(w) {
                    for (r, g) in gw.iter_mut().enumerate() {
                        let s: S = (0..cols).map(|c| up[r * cols + c] * xd[r * cols + c]).sum();
                        *g = *g + s;
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                let cols = self.shape(x)[1];
                let Some(g) = self.grad_buf(x) else { return };
                for (r, &src) in rows.iter().enumerate() {
                    for c in 0..cols {
                        g[src * cols + c] = g[src * cols + c] + up[r * cols + c];
                    }
                }
            }
            Op::ScatterRows { x, rows } => {
                let cols = self.shape(x)[1];
                let Some(g) = self.grad_buf(x) else { return };
                for (r, &dst) in rows.iter().enumerate() {
                    for c in 0..cols {
                        g[r * cols + c] = g[r * cols + c] + up[dst * cols + c];
                    }
                }
            }
            Op::Pick { x, idx } => {
                let Some(g) = self.grad_buf(x) else { return };
                for (r, &j) in idx.iter().enumerate() {
                    g[j] = g[j] + up[r];
                }
            }
            Op::SegmentSum { x, offsets } => {
                let Some(g) = self.grad_buf(x) else { return };
                for (z, w) in offsets.windows(2).enumerate() {
                    for t in w[0]..w[1] {
                        g[t] = g[t] + up[z];
                    }
                }
            }
            Op::CausalMean { x, offsets } => {
                let cols = self.shape(x)[1];
                let Some(g) = self.grad_buf(x) else { return };
                let mut acc = vec![S::zero(); cols];
                for w in offsets.windows(2) {
                    acc.iter_mut().for_each(|a| *a = S::zero());
                    for t in (w[0]..w[1]).rev() {
                        let inv = S::one() / S::from_usize_lossy(t - w[0] + 1);
                        for c in 0..cols {
                            acc[c] = acc[c] + up[t * cols + c] * inv;
                            g[t * cols + c] = g[t * cols + c] + acc[c];
                        }
                    }
                }
            }
        }
    }

    fn acc_map(&mut self, x: Var, up: &[S], f: impl Fn(usize, S) -> S) {
        if let Some(g) = self.grad_buf(x) {
            for (j, gj) in g.iter_mut().enumerate() {
                *gj = *gj + f(j, up.get(j).copied().unwrap_or_else(S::zero));
            }
        }
    }
}

fn dims(shape: &[usize]) -> (usize, usize) {
    (shape[0], shape[1])
}

fn check_offsets(offsets: &[usize], n: usize, op: &'static str) -> Result<()> {
    let ok = offsets.len() >= 2
        && offsets[0] == 0
        && *offsets.last().expect("len >= 2") == n
        && offsets.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(Error::shape(op, &[n], offsets))
    }
}

pub(crate) fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let total: S = row.iter().map(|&v| (v - max).exp()).sum();
    max + total.ln()
}

/// `out += a . b` for row-major `a: [m, k]`, `b: [k, n]`.
pub(crate) fn matmul_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let dst = &mut out[r * n..(r + 1) * n];
        for p in 0..k {
            let av = a[r * k + p];
            if av == S::zero() {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            for (d, &bv) in dst.iter_mut().zip(row) {
                *d = *d + av * bv;
            }
        }
    }
}
