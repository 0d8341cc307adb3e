use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use super::{log_softmax_in_place, softmax_in_place, Real, Tensor};
use crate::{Error, Result};

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    /// `b` is either the same shape as `a` or a single row broadcast over `a`.
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Tanh(usize),
    Sigmoid(usize),
    Log(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(usize, usize),
    GatherRows(usize, Vec<usize>),
    Pick(usize, Vec<usize>),
    Slice { src: usize, row0: usize, col0: usize },
    Transpose(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LogSumExp(usize),
    Sum(usize),
    /// Scalar computed outside the graph together with its gradient with
    /// respect to `src`.
    Fused { src: usize, local: Vec<T>, name: &'static str },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Log(_) => "log",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::Pick(..) => "pick",
            Op::Slice { .. } => "slice",
            Op::Transpose(_) => "transpose",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LogSumExp(_) => "logsumexp",
            Op::Sum(_) => "sum",
            Op::Fused { name, .. } => name,
        }
    }

    fn for_each_input(&self, mut f: impl FnMut(usize)) {
        match self {
            Op::Leaf => {}
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ConcatCols(a, b) => {
                f(*a);
                f(*b);
            }
            Op::ConcatRows(xs) => xs.iter().copied().for_each(f),
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Log(a)
            | Op::GatherRows(a, _)
            | Op::Pick(a, _)
            | Op::Transpose(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::LogSumExp(a)
            | Op::Sum(a) => f(*a),
            Op::Slice { src, .. } | Op::Fused { src, .. } => f(*src),
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only computation graph. Node order is a topological order, and
/// [`Graph::backward`] walks it in exact reverse.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar root with respect to every differentiable leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `id`, or `None` when the root does not depend on it or
    /// it is a constant.
    pub fn get(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn get_or_zero(&self, id: NodeId, len: usize) -> Vec<T> {
        self.get(id).map_or_else(|| vec![T::zero(); len], <[T]>::to_vec)
    }
}

fn shape_err(context: &'static str, expected: (usize, usize), found: (usize, usize)) -> Error {
    Error::Shape {
        context,
        expected: format!("{}x{}", expected.0, expected.1),
        found: format!("{}x{}", found.0, found.1),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        let mut requires_grad = false;
        op.for_each_input(|i| requires_grad |= self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant copy of `a`, cut off from the graph.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> T {
        self.nodes[id.0].value.item()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(shape_err("matmul", (k, m), (k2, m)));
        }
        let mut out = vec![T::zero(); n * m];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let value = Tensor::from_vec(n, m, out)?;
        Ok(self.push(value, Op::MatMul(a.0, b.0)))
    }

    fn broadcast_binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        context: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (n, m) = self.shape(a);
        let sb = self.shape(b);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data: Vec<T> = if sb == (n, m) {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else if sb == (1, m) {
            av.iter()
                .enumerate()
                .map(|(i, &x)| f(x, bv[i % m.max(1)]))
                .collect()
        } else {
            return Err(shape_err(context, (n, m), sb));
        };
        Tensor::from_vec(n, m, data)
    }

    /// `a + b`, broadcasting `b` over rows when it is a single row.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.broadcast_binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a.0, b.0)))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let v = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a.0, c))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(T::tanh);
        self.push(v, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        self.push(v, Op::Sigmoid(a.0))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(T::ln);
        self.push(v, Op::Log(a.0))
    }

    /// Stacks tensors with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = parts.first().map_or(0, |p| self.shape(*p).1);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", (t.rows(), cols), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let v = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(v, Op::ConcatRows(parts.iter().map(|p| p.0).collect())))
    }

    /// Places `b` to the right of `a`.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, ca) = self.shape(a);
        let (nb, cb) = self.shape(b);
        if n != nb {
            return Err(shape_err("concat_cols", (n, cb), (nb, cb)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(n * (ca + cb));
        for r in 0..n {
            data.extend_from_slice(av.row_slice(r));
            data.extend_from_slice(bv.row_slice(r));
        }
        let v = Tensor::from_vec(n, ca + cb, data)?;
        Ok(self.push(v, Op::ConcatCols(a.0, b.0)))
    }

    /// Rows of `a` selected by `indices` (embedding lookup).
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (n, m) = self.shape(a);
        let t = self.value(a);
        let mut data = Vec::with_capacity(indices.len() * m);
        for &i in indices {
            if i >= n {
                return Err(shape_err("gather_rows", (n, m), (i + 1, m)));
            }
            data.extend_from_slice(t.row_slice(i));
        }
        let v = Tensor::from_vec(indices.len(), m, data)?;
        Ok(self.push(v, Op::GatherRows(a.0, indices.to_vec())))
    }

    /// One entry per row: `out[i] = a[i, cols[i]]`, as an `n x 1` column.
    pub fn pick(&mut self, a: NodeId, cols: &[usize]) -> Result<NodeId> {
        let (n, m) = self.shape(a);
        if cols.len() != n || cols.iter().any(|&c| c >= m) {
            return Err(shape_err("pick", (n, m), (cols.len(), cols.iter().max().map_or(0, |c| c + 1))));
        }
        let t = self.value(a);
        let data = cols.iter().enumerate().map(|(i, &c)| t.get(i, c)).collect();
        let v = Tensor::from_vec(n, 1, data)?;
        Ok(self.push(v, Op::Pick(a.0, cols.to_vec())))
    }

    pub fn slice(&mut self, a: NodeId, rows: Range<usize>, cols: Range<usize>) -> Result<NodeId> {
        let (n, m) = self.shape(a);
        if rows.end > n || cols.end > m || rows.start > rows.end || cols.start > cols.end {
            return Err(shape_err("slice", (n, m), (rows.end, cols.end)));
        }
        let t = self.value(a);
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for r in rows.clone() {
            data.extend_from_slice(&t.row_slice(r)[cols.clone()]);
        }
        let v = Tensor::from_vec(rows.len(), cols.len(), data)?;
        Ok(self.push(
            v,
            Op::Slice {
                src: a.0,
                row0: rows.start,
                col0: cols.start,
            },
        ))
    }

    pub fn row(&mut self, a: NodeId, r: usize) -> Result<NodeId> {
        let cols = self.shape(a).1;
        self.slice(a, r..r + 1, 0..cols)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (n, m) = self.shape(a);
        let t = self.value(a);
        let mut data = vec![T::zero(); n * m];
        for r in 0..n {
            for c in 0..m {
                data[c * n + r] = t.get(r, c);
            }
        }
        let v = Tensor::from_vec(m, n, data).expect("transpose preserves size");
        self.push(v, Op::Transpose(a.0))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        let cols = v.cols();
        if cols > 0 {
            v.data_mut().chunks_exact_mut(cols).for_each(softmax_in_place);
        }
        self.push(v, Op::Softmax(a.0))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        let cols = v.cols();
        if cols > 0 {
            v.data_mut().chunks_exact_mut(cols).for_each(log_softmax_in_place);
        }
        self.push(v, Op::LogSoftmax(a.0))
    }

    /// Row-wise logsumexp, as an `n x 1` column.
    pub fn logsumexp(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if t.cols() == 0 {
            return Err(Error::EmptyReduction);
        }
        let data = t
            .iter_rows()
            .map(super::logsumexp)
            .collect::<Result<Vec<T>>>()?;
        let v = Tensor::from_vec(t.rows(), 1, data)?;
        Ok(self.push(v, Op::LogSumExp(a.0)))
    }

    /// Sum of all entries, as a `1 x 1` scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0))
    }

    /// A scalar whose value and gradient with respect to `src` were computed
    /// by an external kernel (used by fused loss kernels such as CTC).
    pub fn fused_scalar(
        &mut self,
        src: NodeId,
        value: T,
        local_grad: Vec<T>,
        name: &'static str,
    ) -> Result<NodeId> {
        let len = self.value(src).len();
        if local_grad.len() != len {
            return Err(Error::Shape {
                context: "fused_scalar",
                expected: format!("{len} gradient entries"),
                found: format!("{}", local_grad.len()),
            });
        }
        Ok(self.push(
            Tensor::scalar(value),
            Op::Fused {
                src: src.0,
                local: local_grad,
                name,
            },
        ))
    }

    /// Reverse-mode gradients of the scalar `root` with respect to every
    /// differentiable leaf it depends on.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        let r = root.0;
        let (rows, cols) = self.shape(root);
        if (rows, cols) != (1, 1) {
            return Err(Error::NotScalar { rows, cols });
        }
        let mut needed = vec![false; r + 1];
        needed[r] = true;
        for i in (0..=r).rev() {
            if needed[i] && self.nodes[i].requires_grad {
                self.nodes[i].op.for_each_input(|j| needed[j] = true);
            }
        }
        for (i, node) in self.nodes[..=r].iter().enumerate() {
            if needed[i] && !node.value.is_finite() {
                return Err(Error::NanInGraph {
                    node: i,
                    op: node.op.name(),
                });
            }
        }

        let mut grads: Vec<Option<Vec<T>>> = vec![None; r + 1];
        if self.nodes[r].requires_grad {
            grads[r] = Some(vec![T::one()]);
        }
        for i in (0..=r).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NanInGraph {
                    node: i,
                    op: node.op.name(),
                });
            }
            self.backprop_node(node, &g, &mut grads);
        }
        // Intermediate buffers were consumed above; only leaves remain.
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.nodes[*a].value.shape();
                let m = self.nodes[*b].value.cols();
                if let Some(ga) = self.grad_buf(*a, grads) {
                    // dA = g · Bᵀ
                    let bv = self.nodes[*b].value.data();
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for kk in 0..k {
                            let brow = &bv[kk * m..(kk + 1) * m];
                            let mut s = T::zero();
                            for j in 0..m {
                                s += grow[j] * brow[j];
                            }
                            ga[i * k + kk] += s;
                        }
                    }
                }
                if let Some(gb) = self.grad_buf(*b, grads) {
                    // dB = Aᵀ · g
                    let av = self.nodes[*a].value.data();
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for kk in 0..k {
                            let aik = av[i * k + kk];
                            if aik == T::zero() {
                                continue;
                            }
                            let brow = &mut gb[kk * m..(kk + 1) * m];
                            for j in 0..m {
                                brow[j] += aik * grow[j];
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                if let Some(ga) = self.grad_buf(*a, grads) {
                    ga.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                }
                let m = node.value.cols().max(1);
                if let Some(gb) = self.grad_buf(*b, grads) {
                    if gb.len() == g.len() {
                        gb.iter_mut().zip(g).for_each(|(d, &x)| *d += sign * x);
                    } else {
                        for (idx, &x) in g.iter().enumerate() {
                            gb[idx % m] += sign * x;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.grad_buf(*a, grads) {
                    let bv = self.nodes[*b].value.data();
                    for ((d, &x), &o) in ga.iter_mut().zip(g).zip(bv) {
                        *d += x * o;
                    }
                }
                if let Some(gb) = self.grad_buf(*b, grads) {
                    let av = self.nodes[*a].value.data();
                    for ((d, &x), &o) in gb.iter_mut().zip(g).zip(av) {
                        *d += x * o;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.grad_buf(*a, grads) {
                    ga.iter_mut().zip(g).for_each(|(d, &x)| *d += *c * x);
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.grad_buf(*a, grads) {
                    for ((d, &x), &t) in ga.iter_mut().zip(g).zip(y) {
                        *d += x * (T::one() - t * t);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.grad_buf(*a, grads) {
                    for ((d, &x), &s) in ga.iter_mut().zip(g).zip(y) {
                        *d += x * s * (T::one() - s);
                    }
                }
            }
            Op::Log(a) => {
                if let Some(ga) = self.grad_buf(*a, grads) {
                    let av = self.nodes[*a].value.data();
                    for ((d, &x), &v) in ga.iter_mut().zip(g).zip(av) {
                        *d += x / v;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    if let Some(gp) = self.grad_buf(p, grads) {
                        gp.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(d, &x)| *d += x);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.nodes[*a].value.cols();
                let cb = self.nodes[*b].value.cols();
                let w = ca + cb;
                if let Some(ga) = self.grad_buf(*a, grads).filter(|_| ca > 0) {
                    for (r, row) in ga.chunks_exact_mut(ca).enumerate() {
                        row.iter_mut()
                            .zip(&g[r * w..r * w + ca])
                            .for_each(|(d, &x)| *d += x);
                    }
                }
                if let Some(gb) = self.grad_buf(*b, grads).filter(|_| cb > 0) {
                    for (r, row) in gb.chunks_exact_mut(cb).enumerate() {
                        row.iter_mut()
                            .zip(&g[r * w + ca..(r + 1) * w])
                            .for_each(|(d, &x)| *d += x);
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let m = node.value.cols();
                if let Some(ga) = self.grad_buf(*a, grads) {
                    for (r, &src) in idx.iter().enumerate() {
                        ga[src * m..(src + 1) * m]
                            .iter_mut()
                            .zip(&g[r * m..(r + 1) * m])
                            .for_each(|(d, &x)| *d += x);
                    }
                }
            }
            Op::Pick(a, cols) => {
                let m = self.nodes[*a].value.cols();
                if let Some(ga) = self.grad_buf(*a, grads) {
                    for (r, &c) in cols.iter().enumerate() {
                        ga[r * m + c] += g[r];
                    }
                }
            }
            Op::Slice { src, row0, col0 } => {
                let m = self.nodes[*src].value.cols();
                let (n_out, m_out) = node.value.shape();
                if let Some(gs) = self.grad_buf(*src, grads) {
                    for r in 0..n_out {
                        let base = (row0 + r) * m + col0;
                        gs[base..base + m_out]
                            .iter_mut()
                            .zip(&g[r * m_out..(r + 1) * m_out])
                            .for_each(|(d, &x)| *d += x);
                    }
                }
            }
            Op::Transpose(a) => {
                let (n, m) = self.nodes[*a].value.shape();
                if let Some(ga) = self.grad_buf(*a, grads) {
                    for r in 0..n {
                        for c in 0..m {
                            ga[r * m + c] += g[c * n + r];
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let m = node.value.cols().max(1);
                if let Some(ga) = self.grad_buf(*a, grads) {
                    for ((dr, gr), yr) in ga.chunks_exact_mut(m).zip(g.chunks_exact(m)).zip(y.chunks_exact(m)) {
                        let dot: T = gr.iter().zip(yr).map(|(&x, &p)| x * p).sum();
                        for ((d, &x), &p) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += p * (x - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let m = node.value.cols().max(1);
                if let Some(ga) = self.grad_buf(*a, grads) {
                    for ((dr, gr), yr) in ga.chunks_exact_mut(m).zip(g.chunks_exact(m)).zip(y.chunks_exact(m)) {
                        let total: T = gr.iter().copied().sum();
                        for ((d, &x), &l) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += x - l.exp() * total;
                        }
                    }
                }
            }
            Op::LogSumExp(a) => {
                let m = self.nodes[*a].value.cols();
                if let Some(ga) = self.grad_buf(*a, grads) {
                    let av = self.nodes[*a].value.data();
                    for r in 0..g.len() {
                        for c in 0..m {
                            ga[r * m + c] += g[r] * (av[r * m + c] - y[r]).exp();
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.grad_buf(*a, grads) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Fused { src, local, .. } => {
                if let Some(gs) = self.grad_buf(*src, grads) {
                    gs.iter_mut().zip(local).for_each(|(d, &l)| *d += g[0] * l);
                }
            }
        }
    }

    /// Gradient accumulator for node `i`, allocated on first use; `None`
    /// for constants.
    fn grad_buf<'g>(&self, i: usize, grads: &'g mut [Option<Vec<T>>]) -> Option<&'g mut Vec<T>> {
        if !self.nodes[i].requires_grad {
            return None;
        }
        let len = self.nodes[i].value.len();
        Some(grads[i].get_or_insert_with(|| vec![T::zero(); len]))
    }
}

/// `out += a · b` for row-major `a: n x k`, `b: k x m`.
pub(crate) fn matmul_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == T::zero() {
                continue;
            }
            let brow = &b[kk * m..(kk + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}
