//! Tape-based reverse-mode differentiation.
//!
//! Every op appends one node holding its forward value and enough context to
//! run its backward rule. Nodes only reference earlier nodes, so a single
//! reverse sweep over the tape visits operations in topological order.

use super::tensor::{split_axis, Tensor};
use super::TensorError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate backward-rule corruption, used to prove the gradient checker
/// can fail.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BackwardFault {
    #[default]
    None,
    /// ReLU passes gradient through unconditionally.
    ReluPassThrough,
}

#[derive(Debug)]
enum Op {
    Leaf { requires_grad: bool },
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    TransposeLast(Var),
    Reshape(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var, usize),
    Concat(Vec<Var>, usize),
    Stack(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    MeanPool(Var, usize),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    CrossEntropy { logits: Var, rows: Vec<(usize, usize)>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation for later differentiation.
///
/// A tape is single-threaded; use one per sequence or per worker.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: BackwardFault,
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// C = beta·C + A·B, with A and B described by (row stride, column stride).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    assert!(b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    assert_eq!(c.len(), m * n);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<(), TensorError> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(TensorError::NonFinite { op, index }),
        None => Ok(()),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn with_fault(fault: BackwardFault) -> Self {
        Self { nodes: Vec::new(), fault }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var, TensorError> {
        check_finite(name, value.data())?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf { requires_grad: true } });
        Var(self.nodes.len() - 1)
    }

    /// An input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf { requires_grad: false } });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), (k, 1), self.value(b).data(), (n, 1), &mut out, 0.0);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), "matmul")
    }

    /// Batched product of `[b, m, k]` and `[b, k, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::shape("batch_matmul", format!("{sa:?} x {sb:?}")));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for p in 0..batch {
            gemm(
                m,
                k,
                n,
                &da[p * m * k..(p + 1) * m * k],
                (k, 1),
                &db[p * k * n..(p + 1) * k * n],
                (n, 1),
                &mut out[p * m * n..(p + 1) * m * n],
                0.0,
            );
        }
        self.push(Tensor::from_parts(vec![batch, m, n], out), Op::BatchMatMul(a, b), "batch_matmul")
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::shape("transpose_last", format!("{shape:?}")));
        }
        let out = transpose_last_data(self.value(x).data(), &shape);
        let mut new_shape = shape;
        let r = new_shape.len();
        new_shape.swap(r - 2, r - 1);
        self.push(Tensor::from_parts(new_shape, out), Op::TransposeLast(x), "transpose_last")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let len: usize = shape.iter().product();
        if len != self.value(x).len() || shape.contains(&0) {
            return Err(TensorError::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let data = self.value(x).data().to_vec();
        self.push(Tensor::from_parts(shape.to_vec(), data), Op::Reshape(x), "reshape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Add(a, b), "add")
    }

    /// Adds a length-`n` vector to every trailing row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.value(bias).len() != n || self.shape(bias).len() != 1 {
            return Err(TensorError::shape(
                "add_row",
                format!("{:?} + {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let b = self.value(bias).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, c)| v + c))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::AddRow(x, bias), "add_row")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, TensorError> {
        let out = self.value(x).data().iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Scale(x, factor), "scale")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Relu(x), "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).data().iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Sigmoid(x), "sigmoid")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).data().iter().map(|v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Tanh(x), "tanh")
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let (outer, dim, inner) = split_axis(&shape, axis, "softmax")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * dim + a) * inner + i;
                let max = (0..dim).map(|a| src[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for a in 0..dim {
                    let e = (src[idx(a)] - max).exp();
                    out[idx(a)] = e;
                    total += e;
                }
                for a in 0..dim {
                    out[idx(a)] /= total;
                }
            }
        }
        self.push(Tensor::from_parts(shape, out), Op::Softmax(x, axis), "softmax")
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::shape("concat", "no inputs".to_string()))?;
        let base = self.shape(*first).to_vec();
        let (outer, _, inner) = split_axis(&base, axis, "concat")?;
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::shape("concat", format!("{base:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let dim = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * dim * inner..(o + 1) * dim * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(Tensor::from_parts(shape, out), Op::Concat(xs.to_vec(), axis), "concat")
    }

    /// Stacks equal-shaped tensors along a new axis inserted at `axis`.
    pub fn stack(&mut self, xs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::shape("stack", "no inputs".to_string()))?;
        let base = self.shape(*first).to_vec();
        if axis > base.len() {
            return Err(TensorError::shape("stack", format!("axis {axis} for {base:?}")));
        }
        if let Some(&bad) = xs.iter().find(|&&v| self.shape(v) != base.as_slice()) {
            return Err(TensorError::shape("stack", format!("{base:?} vs {:?}", self.shape(bad))));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis..].iter().product();
        let mut out = Vec::with_capacity(outer * xs.len() * inner);
        for o in 0..outer {
            for &v in xs {
                out.extend_from_slice(&self.value(v).data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = base;
        shape.insert(axis, xs.len());
        self.push(Tensor::from_parts(shape, out), Op::Stack(xs.to_vec(), axis), "stack")
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let out = self.value(x).slice_axis(axis, start, len)?;
        self.push(out, Op::Slice { x, axis, start }, "slice")
    }

    /// Arithmetic mean along `axis`, removing it.
    pub fn mean_pool(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let (outer, dim, inner) = split_axis(&shape, axis, "mean_pool")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..dim {
                let row = &src[(o * dim + a) * inner..(o * dim + a + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let inv = 1.0 / dim as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut new_shape = shape;
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        self.push(Tensor::from_parts(new_shape, out), Op::MeanPool(x, axis), "mean_pool")
    }

    /// Selects rows of a 2-D table.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 || indices.is_empty() {
            return Err(TensorError::shape("gather_rows", format!("{shape:?}")));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[0]) {
            return Err(TensorError::shape("gather_rows", format!("row {bad} of {}", shape[0])));
        }
        let t = self.value(table);
        let out: Vec<f64> = indices.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        self.push(
            Tensor::from_parts(vec![indices.len(), shape[1]], out),
            Op::GatherRows(table, indices.to_vec()),
            "gather_rows",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), "sum")
    }

    /// Mean negative log-likelihood over rows whose mask is set.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        mask: &[bool],
    ) -> Result<Var, TensorError> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || labels.len() != shape[0] || mask.len() != shape[0] {
            return Err(TensorError::shape(
                "cross_entropy",
                format!("logits {shape:?}, {} labels, {} mask", labels.len(), mask.len()),
            ));
        }
        let classes = shape[1];
        let rows: Vec<(usize, usize)> = labels
            .iter()
            .zip(mask)
            .enumerate()
            .filter(|(_, (_, &m))| m)
            .map(|(i, (&l, _))| (i, l))
            .collect();
        if rows.is_empty() {
            return Err(TensorError::Domain {
                op: "cross_entropy",
                detail: "mask selects no rows".to_string(),
            });
        }
        if let Some(&(_, bad)) = rows.iter().find(|(_, l)| *l >= classes) {
            return Err(TensorError::Domain {
                op: "cross_entropy",
                detail: format!("label {bad} outside {classes} classes"),
            });
        }
        let x = self.value(logits);
        let mut probs = Vec::with_capacity(rows.len() * classes);
        let mut loss = 0.0;
        for &(i, label) in &rows {
            let row = x.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + total.ln();
            loss += log_z - row[label];
            probs.extend(row.iter().map(|v| (v - log_z).exp()));
        }
        loss /= rows.len() as f64;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, rows, probs },
            "cross_entropy",
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::State(format!("loss {loss:?} is not on this tape")));
        }
        if !self.value(loss).is_scalar() {
            return Err(TensorError::Domain {
                op: "backward",
                detail: format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf { .. }) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            // Interior gradients are not needed after propagation.
        }

        let out = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| match node.op {
                Op::Leaf { requires_grad: true } if i <= loss.0 => Some(
                    grads[i]
                        .take()
                        .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g))
                        .unwrap_or_else(|| Tensor::zeros(node.value.shape())),
                ),
                Op::Leaf { requires_grad: true } => Some(Tensor::zeros(node.value.shape())),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let sa = self.shape(*a);
                let (m, k, n) = (sa[0], sa[1], self.shape(*b)[1]);
                let ga = accumulate(&mut grads[a.0], m * k);
                gemm(m, n, k, g, (n, 1), val(*b), (1, n), ga, 1.0);
                let gb = accumulate(&mut grads[b.0], k * n);
                gemm(k, m, n, val(*a), (1, k), g, (n, 1), gb, 1.0);
            }
            Op::BatchMatMul(a, b) => {
                let sa = self.shape(*a);
                let (batch, m, k, n) = (sa[0], sa[1], sa[2], self.shape(*b)[2]);
                let (da, db) = (val(*a), val(*b));
                let ga = accumulate(&mut grads[a.0], batch * m * k);
                for p in 0..batch {
                    gemm(
                        m,
                        n,
                        k,
                        &g[p * m * n..(p + 1) * m * n],
                        (n, 1),
                        &db[p * k * n..(p + 1) * k * n],
                        (1, n),
                        &mut ga[p * m * k..(p + 1) * m * k],
                        1.0,
                    );
                }
                let gb = accumulate(&mut grads[b.0], batch * k * n);
                for p in 0..batch {
                    gemm(
                        k,
                        m,
                        n,
                        &da[p * m * k..(p + 1) * m * k],
                        (1, k),
                        &g[p * m * n..(p + 1) * m * n],
                        (n, 1),
                        &mut gb[p * k * n..(p + 1) * k * n],
                        1.0,
                    );
                }
            }
            Op::TransposeLast(x) => {
                let back = transpose_last_data(g, node.value.shape());
                add_into(accumulate(&mut grads[x.0], len(*x)), &back);
            }
            Op::Reshape(x) => add_into(accumulate(&mut grads[x.0], len(*x)), g),
            Op::Add(a, b) => {
                add_into(accumulate(&mut grads[a.0], g.len()), g);
                add_into(accumulate(&mut grads[b.0], g.len()), g);
            }
            Op::AddRow(x, bias) => {
                add_into(accumulate(&mut grads[x.0], g.len()), g);
                let n = len(*bias);
                let gb = accumulate(&mut grads[bias.0], n);
                for row in g.chunks(n) {
                    add_into(gb, row);
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (val(*a), val(*b));
                let ga = accumulate(&mut grads[a.0], g.len());
                for ((acc, gi), bi) in ga.iter_mut().zip(g).zip(db) {
                    *acc += gi * bi;
                }
                let gb = accumulate(&mut grads[b.0], g.len());
                for ((acc, gi), ai) in gb.iter_mut().zip(g).zip(da) {
                    *acc += gi * ai;
                }
            }
            Op::Scale(x, factor) => {
                let gx = accumulate(&mut grads[x.0], g.len());
                for (acc, gi) in gx.iter_mut().zip(g) {
                    *acc += gi * factor;
                }
            }
            Op::Relu(x) => {
                let input = val(*x);
                let pass_all = self.fault == BackwardFault::ReluPassThrough;
                let gx = accumulate(&mut grads[x.0], g.len());
                for ((acc, gi), xi) in gx.iter_mut().zip(g).zip(input) {
                    if pass_all || *xi > 0.0 {
                        *acc += gi;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let gx = accumulate(&mut grads[x.0], g.len());
                for ((acc, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                    *acc += gi * yi * (1.0 - yi);
                }
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                let gx = accumulate(&mut grads[x.0], g.len());
                for ((acc, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                    *acc += gi * (1.0 - yi * yi);
                }
            }
            Op::Softmax(x, axis) => {
                let y = node.value.data();
                let (outer, dim, inner) =
                    split_axis(node.value.shape(), *axis, "softmax").expect("validated in forward");
                let gx = accumulate(&mut grads[x.0], g.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| (o * dim + a) * inner + i;
                        let dot: f64 = (0..dim).map(|a| g[idx(a)] * y[idx(a)]).sum();
                        for a in 0..dim {
                            gx[idx(a)] += y[idx(a)] * (g[idx(a)] - dot);
                        }
                    }
                }
            }
            Op::Concat(xs, axis) => {
                let shape = node.value.shape();
                let (outer, total, inner) =
                    split_axis(shape, *axis, "concat").expect("validated in forward");
                let mut offset = 0;
                for &v in xs {
                    let dim = self.shape(v)[*axis];
                    let gv = accumulate(&mut grads[v.0], len(v));
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + dim) * inner];
                        add_into(&mut gv[o * dim * inner..(o + 1) * dim * inner], src);
                    }
                    offset += dim;
                }
            }
            Op::Stack(xs, axis) => {
                let base = self.shape(xs[0]);
                let outer: usize = base[..*axis].iter().product();
                let inner: usize = base[*axis..].iter().product();
                let count = xs.len();
                for (k, &v) in xs.iter().enumerate() {
                    let gv = accumulate(&mut grads[v.0], outer * inner);
                    for o in 0..outer {
                        let src = &g[(o * count + k) * inner..(o * count + k + 1) * inner];
                        add_into(&mut gv[o * inner..(o + 1) * inner], src);
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, dim, inner) =
                    split_axis(self.shape(*x), *axis, "slice").expect("validated in forward");
                let width = node.value.shape()[*axis];
                let gx = accumulate(&mut grads[x.0], outer * dim * inner);
                for o in 0..outer {
                    let dst = &mut gx[(o * dim + start) * inner..(o * dim + start + width) * inner];
                    add_into(dst, &g[o * width * inner..(o + 1) * width * inner]);
                }
            }
            Op::MeanPool(x, axis) => {
                let (outer, dim, inner) =
                    split_axis(self.shape(*x), *axis, "mean_pool").expect("validated in forward");
                let inv = 1.0 / dim as f64;
                let gx = accumulate(&mut grads[x.0], outer * dim * inner);
                for o in 0..outer {
                    for a in 0..dim {
                        let dst = &mut gx[(o * dim + a) * inner..(o * dim + a + 1) * inner];
                        for (acc, gi) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *acc += gi * inv;
                        }
                    }
                }
            }
            Op::GatherRows(table, indices) => {
                let d = self.shape(*table)[1];
                let gt = accumulate(&mut grads[table.0], len(*table));
                for (r, &i) in indices.iter().enumerate() {
                    add_into(&mut gt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
            Op::Sum(x) => {
                let gx = accumulate(&mut grads[x.0], len(*x));
                gx.iter_mut().for_each(|acc| *acc += g[0]);
            }
            Op::CrossEntropy { logits, rows, probs } => {
                let classes = self.shape(*logits)[1];
                let scale = g[0] / rows.len() as f64;
                let gl = accumulate(&mut grads[logits.0], len(*logits));
                for (r, &(i, label)) in rows.iter().enumerate() {
                    let p = &probs[r * classes..(r + 1) * classes];
                    let dst = &mut gl[i * classes..(i + 1) * classes];
                    for (c, (acc, pc)) in dst.iter_mut().zip(p).enumerate() {
                        let target = if c == label { 1.0 } else { 0.0 };
                        *acc += scale * (pc - target);
                    }
                }
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn transpose_last_data(src: &[f64], shape: &[usize]) -> Vec<f64> {
    let r = shape.len();
    let (m, n) = (shape[r - 2], shape[r - 1]);
    let batch = src.len() / (m * n);
    let mut out = vec![0.0; src.len()];
    for p in 0..batch {
        let (s, d) = (&src[p * m * n..(p + 1) * m * n], &mut out[p * m * n..(p + 1) * m * n]);
        for i in 0..m {
            for j in 0..n {
                d[j * m + i] = s[i * n + j];
            }
        }
    }
    out
}
