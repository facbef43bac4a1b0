//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every op executed through a [`Var`] together with the
//! values its backward rule needs. [`Tape::backward`] then walks the record
//! in exact reverse order, so a tape is single-threaded by construction;
//! independent tapes can run on separate threads against a shared
//! [`ParamStore`].
//!
//! Gradients only flow through nodes that require them: constants and
//! frozen parameters are recorded but never receive a gradient buffer.

use std::cell::RefCell;
use std::rc::Rc;

use super::linalg::{matmul, matmul_nt, matmul_tn};
use super::params::{ParamId, ParamStore};
use super::tensor::{check_finite, Tensor, TensorError, TensorResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Transpose(usize),
    Tanh(usize),
    Gelu(usize),
    Softmax {
        x: usize,
        axis: usize,
    },
    MaskedSoftmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows {
        x: usize,
        start: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        scale: f64,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed ops.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.shape())
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    leaves: Vec<(usize, Tensor)>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    /// Gradient of a leaf created with [`Tape::leaf`] or [`Tape::param`].
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.leaves
            .iter()
            .find(|(id, _)| *id == var.id)
            .map(|(_, g)| g)
    }

    /// Per-parameter gradients, summed when a parameter was loaded more than
    /// once on the same tape.
    pub fn params(&self) -> &[(ParamId, Tensor)] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    /// Adds every parameter gradient into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> TensorResult<()> {
        for (id, g) in &self.params {
            store.accumulate_grad(*id, g)?;
        }
        Ok(())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn checked<'t>(
        &'t self,
        op_name: &'static str,
        value: Tensor,
        op: Op,
        requires_grad: bool,
    ) -> TensorResult<Var<'t>> {
        check_finite(op_name, value.data())?;
        Ok(self.push(value, op, requires_grad))
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Differentiable input that is not a stored parameter.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Loads a parameter; frozen parameters never receive gradients.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), !p.frozen)
    }

    /// Row lookup `table[ids]` producing `(ids.len(), d)`.
    pub fn embedding<'t>(&'t self, table: Var<'t>, ids: &[usize]) -> TensorResult<Var<'t>> {
        let t = table.value();
        if t.ndim() != 2 {
            return Err(TensorError::Dimension {
                op: "embedding",
                left: t.shape().to_vec(),
                right: vec![2],
            });
        }
        if ids.is_empty() {
            return Err(TensorError::Contract("embedding of empty id list".into()));
        }
        let (vocab, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= vocab {
                return Err(TensorError::Index {
                    op: "embedding",
                    index: i,
                    size: vocab,
                });
            }
            out.extend_from_slice(t.row(i));
        }
        let rg = self.rg(table.id);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Embedding {
                table: table.id,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> TensorResult<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let cols = first.value().as_matrix_dims().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = p.value();
            let (r, c) = v.as_matrix_dims();
            if c != cols {
                return Err(TensorError::Dimension {
                    op: "concat_rows",
                    left: first.shape(),
                    right: v.shape().to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(v.data());
        }
        let rg = parts.iter().any(|p| self.rg(p.id));
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], data),
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
            rg,
        ))
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> TensorResult<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let rows = first.value().as_matrix_dims().0;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let mut total_cols = 0;
        for v in &values {
            let (r, c) = v.as_matrix_dims();
            if r != rows {
                return Err(TensorError::Dimension {
                    op: "concat_cols",
                    left: first.shape(),
                    right: v.shape().to_vec(),
                });
            }
            total_cols += c;
        }
        let mut data = Vec::with_capacity(rows * total_cols);
        for i in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row(i));
            }
        }
        let rg = parts.iter().any(|p| self.rg(p.id));
        Ok(self.push(
            Tensor::from_parts(vec![rows, total_cols], data),
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
            rg,
        ))
    }

    /// Runs reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> TensorResult<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.id + 1);
        grads.resize_with(loss.id + 1, || None);
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));
        }
        let mut leaves = Vec::new();
        let mut params: Vec<(ParamId, Tensor)> = Vec::new();

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &node.op {
                Op::Leaf => leaves.push((id, g)),
                Op::Param(pid) => {
                    if let Some((_, acc)) = params.iter_mut().find(|(p, _)| p == pid) {
                        acc.add_assign(&g);
                    } else {
                        params.push((*pid, g.clone()));
                    }
                    leaves.push((id, g));
                }
                op => backward_op(&nodes, node, op, &g, &mut grads),
            }
        }
        params.sort_by_key(|(p, _)| *p);
        Ok(Gradients { leaves, params })
    }
}

fn accum(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn backward_op(nodes: &[Node], node: &Node, op: &Op, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    let rg = |id: usize| nodes[id].requires_grad;
    let shaped = |id: usize, data: Vec<f64>| Tensor::from_parts(val(id).shape().to_vec(), data);
    match op {
        Op::Leaf | Op::Param(_) => unreachable!(),
        Op::Add(a, b) => {
            accum(nodes, grads, *a, g.clone());
            accum(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accum(nodes, grads, *a, g.clone());
            if rg(*b) {
                let neg = g.data().iter().map(|v| -v).collect();
                accum(nodes, grads, *b, shaped(*b, neg));
            }
        }
        Op::Mul(a, b) => {
            if rg(*a) {
                let d = g.data().iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                accum(nodes, grads, *a, shaped(*a, d));
            }
            if rg(*b) {
                let d = g.data().iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                accum(nodes, grads, *b, shaped(*b, d));
            }
        }
        Op::Scale(a, s) => {
            let d = g.data().iter().map(|v| v * s).collect();
            accum(nodes, grads, *a, shaped(*a, d));
        }
        Op::AddRow(a, bias) => {
            accum(nodes, grads, *a, shaped(*a, g.data().to_vec()));
            if rg(*bias) {
                let (rows, cols) = g.as_matrix_dims();
                let mut db = vec![0.0; cols];
                for r in 0..rows {
                    for (acc, v) in db.iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
                accum(nodes, grads, *bias, shaped(*bias, db));
            }
        }
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).as_matrix_dims();
            let n = val(*b).shape()[1];
            if rg(*a) {
                let d = matmul_nt(g.data(), m, n, val(*b).data(), k);
                accum(nodes, grads, *a, shaped(*a, d));
            }
            if rg(*b) {
                let d = matmul_tn(val(*a).data(), m, k, g.data(), n);
                accum(nodes, grads, *b, shaped(*b, d));
            }
        }
        Op::MatMulT(a, b) => {
            // out = a · bᵀ, a: (m, k), b: (n, k)
            let (m, k) = val(*a).as_matrix_dims();
            let n = val(*b).shape()[0];
            if rg(*a) {
                let d = matmul(g.data(), m, n, val(*b).data(), k);
                accum(nodes, grads, *a, shaped(*a, d));
            }
            if rg(*b) {
                let d = matmul_tn(g.data(), m, n, val(*a).data(), k);
                accum(nodes, grads, *b, shaped(*b, d));
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    d[i * c + j] = g.data()[j * r + i];
                }
            }
            accum(nodes, grads, *a, shaped(*a, d));
        }
        Op::Tanh(a) => {
            let d = g
                .data()
                .iter()
                .zip(node.value.data())
                .map(|(g, y)| g * (1.0 - y * y))
                .collect();
            accum(nodes, grads, *a, shaped(*a, d));
        }
        Op::Gelu(a) => {
            let d = g
                .data()
                .iter()
                .zip(val(*a).data())
                .map(|(g, &x)| g * gelu_grad(x))
                .collect();
            accum(nodes, grads, *a, shaped(*a, d));
        }
        Op::Softmax { x, axis } => {
            let y = node.value.data();
            let (outer, len, inner) = axis_layout(node.value.shape(), *axis);
            let mut d = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let dot: f64 = (0..len).map(|j| g.data()[idx(j)] * y[idx(j)]).sum();
                    for j in 0..len {
                        d[idx(j)] = y[idx(j)] * (g.data()[idx(j)] - dot);
                    }
                }
            }
            accum(nodes, grads, *x, shaped(*x, d));
        }
        Op::MaskedSoftmax(x) => {
            let y = &node.value;
            let (rows, cols) = y.as_matrix_dims();
            let mut d = vec![0.0; rows * cols];
            for r in 0..rows {
                let yr = y.row(r);
                let gr = g.row(r);
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for c in 0..cols {
                    d[r * cols + c] = yr[c] * (gr[c] - dot);
                }
            }
            accum(nodes, grads, *x, shaped(*x, d));
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let (rows, cols) = g.as_matrix_dims();
            let gv = val(*gain).data();
            if rg(*x) {
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let gr = g.row(r);
                    let xh = &xhat[r * cols..(r + 1) * cols];
                    let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                    let mean_dx =
                        dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for c in 0..cols {
                        dx[r * cols + c] = rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                    }
                }
                accum(nodes, grads, *x, shaped(*x, dx));
            }
            if rg(*gain) || rg(*bias) {
                let mut dg = vec![0.0; cols];
                let mut db = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let gv = g.data()[r * cols + c];
                        dg[c] += gv * xhat[r * cols + c];
                        db[c] += gv;
                    }
                }
                accum(nodes, grads, *gain, shaped(*gain, dg));
                accum(nodes, grads, *bias, shaped(*bias, db));
            }
        }
        Op::Embedding { table, ids } => {
            let d = val(*table).shape()[1];
            let mut dt = vec![0.0; val(*table).numel()];
            for (r, &i) in ids.iter().enumerate() {
                for c in 0..d {
                    dt[i * d + c] += g.data()[r * d + c];
                }
            }
            accum(nodes, grads, *table, shaped(*table, dt));
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = val(p).numel();
                if rg(p) {
                    accum(nodes, grads, p, shaped(p, g.data()[offset..offset + n].to_vec()));
                }
                offset += n;
            }
        }
        Op::ConcatCols(parts) => {
            let (rows, total) = g.as_matrix_dims();
            let mut col = 0;
            for &p in parts {
                let c = val(p).as_matrix_dims().1;
                if rg(p) {
                    let mut d = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        d.extend_from_slice(&g.data()[r * total + col..r * total + col + c]);
                    }
                    accum(nodes, grads, p, shaped(p, d));
                }
                col += c;
            }
        }
        Op::SliceRows { x, start } => {
            let cols = val(*x).as_matrix_dims().1;
            let mut d = vec![0.0; val(*x).numel()];
            d[start * cols..start * cols + g.numel()].copy_from_slice(g.data());
            accum(nodes, grads, *x, shaped(*x, d));
        }
        Op::SliceCols { x, start } => {
            let (rows, cols) = val(*x).as_matrix_dims();
            let width = g.as_matrix_dims().1;
            let mut d = vec![0.0; rows * cols];
            for r in 0..rows {
                d[r * cols + start..r * cols + start + width].copy_from_slice(g.row(r));
            }
            accum(nodes, grads, *x, shaped(*x, d));
        }
        Op::Reshape(a) => accum(nodes, grads, *a, shaped(*a, g.data().to_vec())),
        Op::Sum(a) => {
            let n = val(*a).numel();
            accum(nodes, grads, *a, shaped(*a, vec![g.item(); n]));
        }
        Op::Mean(a) => {
            let n = val(*a).numel();
            accum(nodes, grads, *a, shaped(*a, vec![g.item() / n as f64; n]));
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
            scale,
        } => {
            let vocab = val(*logits).as_matrix_dims().1;
            let upstream = g.item() * scale;
            let mut d = vec![0.0; probs.len()];
            for (r, t) in targets.iter().enumerate() {
                if let Some(t) = t {
                    for c in 0..vocab {
                        d[r * vocab + c] = upstream * probs[r * vocab + c];
                    }
                    d[r * vocab + t] -= upstream;
                }
            }
            accum(nodes, grads, *logits, shaped(*logits, d));
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> TensorResult<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(TensorError::Dimension {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.id)
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn either_rg(&self, other: &Var<'t>) -> bool {
        self.requires_grad() || other.requires_grad()
    }

    fn zip_with(
        &self,
        other: &Var<'t>,
        op_name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> TensorResult<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape(op_name, &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        let rg = self.either_rg(other);
        self.tape
            .checked(op_name, Tensor::from_parts(a.shape().to_vec(), data), op, rg)
    }

    pub fn add(&self, other: &Var<'t>) -> TensorResult<Var<'t>> {
        self.zip_with(other, "add", Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(&self, other: &Var<'t>) -> TensorResult<Var<'t>> {
        self.zip_with(other, "sub", Op::Sub(self.id, other.id), |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(&self, other: &Var<'t>) -> TensorResult<Var<'t>> {
        self.zip_with(other, "hadamard", Op::Mul(self.id, other.id), |x, y| x * y)
    }

    pub fn scale(&self, s: f64) -> TensorResult<Var<'t>> {
        let a = self.value();
        let data = a.data().iter().map(|x| x * s).collect();
        self.tape.checked(
            "scale",
            Tensor::from_parts(a.shape().to_vec(), data),
            Op::Scale(self.id, s),
            self.requires_grad(),
        )
    }

    /// Adds a `(d)` bias to every row of a `(.., d)` tensor.
    pub fn add_row(&self, bias: &Var<'t>) -> TensorResult<Var<'t>> {
        let (a, b) = (self.value(), bias.value());
        let (_, cols) = a.as_matrix_dims();
        if b.numel() != cols {
            return Err(TensorError::Dimension {
                op: "add_row",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + b.data()[i % cols])
            .collect();
        let rg = self.either_rg(bias);
        self.tape.checked(
            "add_row",
            Tensor::from_parts(a.shape().to_vec(), data),
            Op::AddRow(self.id, bias.id),
            rg,
        )
    }

    /// `(m, k) · (k, n)`; leading axes of `self` fold into rows.
    pub fn matmul(&self, other: &Var<'t>) -> TensorResult<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = a.as_matrix_dims();
        if b.ndim() != 2 || b.shape()[0] != k {
            return Err(TensorError::Dimension {
                op: "matmul",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let n = b.shape()[1];
        let data = matmul(a.data(), m, k, b.data(), n);
        let rg = self.either_rg(other);
        self.tape.checked(
            "matmul",
            Tensor::from_parts(vec![m, n], data),
            Op::MatMul(self.id, other.id),
            rg,
        )
    }

    /// `self · otherᵀ` with `self: (m, k)` and `other: (n, k)`.
    pub fn matmul_t(&self, other: &Var<'t>) -> TensorResult<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = a.as_matrix_dims();
        let (n, k2) = b.as_matrix_dims();
        if k != k2 {
            return Err(TensorError::Dimension {
                op: "matmul_t",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let data = matmul_nt(a.data(), m, k, b.data(), n);
        let rg = self.either_rg(other);
        self.tape.checked(
            "matmul_t",
            Tensor::from_parts(vec![m, n], data),
            Op::MatMulT(self.id, other.id),
            rg,
        )
    }

    pub fn transpose(&self) -> TensorResult<Var<'t>> {
        let a = self.value();
        if a.ndim() != 2 {
            return Err(TensorError::Dimension {
                op: "transpose",
                left: a.shape().to_vec(),
                right: vec![2],
            });
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = a.data()[i * c + j];
            }
        }
        Ok(self.tape.push(
            Tensor::from_parts(vec![c, r], data),
            Op::Transpose(self.id),
            self.requires_grad(),
        ))
    }

    pub fn tanh(&self) -> TensorResult<Var<'t>> {
        let a = self.value();
        let data = a.data().iter().map(|x| x.tanh()).collect();
        self.tape.checked(
            "tanh",
            Tensor::from_parts(a.shape().to_vec(), data),
            Op::Tanh(self.id),
            self.requires_grad(),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> TensorResult<Var<'t>> {
        let a = self.value();
        let data = a.data().iter().map(|&x| gelu(x)).collect();
        self.tape.checked(
            "gelu",
            Tensor::from_parts(a.shape().to_vec(), data),
            Op::Gelu(self.id),
            self.requires_grad(),
        )
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> TensorResult<Var<'t>> {
        let a = self.value();
        if axis >= a.ndim() {
            return Err(TensorError::Dimension {
                op: "softmax",
                left: a.shape().to_vec(),
                right: vec![axis],
            });
        }
        let (outer, len, inner) = axis_layout(a.shape(), axis);
        let x = a.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x[idx(j)] - max).exp();
                    y[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    y[idx(j)] /= total;
                }
            }
        }
        self.tape.checked(
            "softmax",
            Tensor::from_parts(a.shape().to_vec(), y),
            Op::Softmax { x: self.id, axis },
            self.requires_grad(),
        )
    }

    /// Row-wise softmax over the last axis where `visible[i] == false`
    /// entries get exactly zero probability.
    pub fn masked_softmax(&self, visible: &[bool]) -> TensorResult<Var<'t>> {
        let a = self.value();
        if visible.len() != a.numel() {
            return Err(TensorError::Dimension {
                op: "masked_softmax",
                left: a.shape().to_vec(),
                right: vec![visible.len()],
            });
        }
        let (rows, cols) = a.as_matrix_dims();
        let mut y = vec![0.0; rows * cols];
        for r in 0..rows {
            let xr = a.row(r);
            let mr = &visible[r * cols..(r + 1) * cols];
            let max = xr
                .iter()
                .zip(mr)
                .filter(|(_, m)| **m)
                .map(|(x, _)| *x)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(TensorError::Contract(format!(
                    "masked_softmax: row {r} has no visible entries"
                )));
            }
            let mut total = 0.0;
            for c in 0..cols {
                if mr[c] {
                    let e = (xr[c] - max).exp();
                    y[r * cols + c] = e;
                    total += e;
                }
            }
            for v in &mut y[r * cols..(r + 1) * cols] {
                *v /= total;
            }
        }
        self.tape.checked(
            "masked_softmax",
            Tensor::from_parts(a.shape().to_vec(), y),
            Op::MaskedSoftmax(self.id),
            self.requires_grad(),
        )
    }

    /// Layer normalisation over the last axis with affine `gain`/`bias`.
    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>, eps: f64) -> TensorResult<Var<'t>> {
        let a = self.value();
        let (rows, cols) = a.as_matrix_dims();
        let (gv, bv) = (gain.value(), bias.value());
        if gv.numel() != cols || bv.numel() != cols {
            return Err(TensorError::Dimension {
                op: "layer_norm",
                left: a.shape().to_vec(),
                right: gv.shape().to_vec(),
            });
        }
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut y = vec![0.0; rows * cols];
        for r in 0..rows {
            let xr = a.row(r);
            let mean = xr.iter().sum::<f64>() / cols as f64;
            let var = xr.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (xr[c] - mean) * rs;
                xhat[r * cols + c] = h;
                y[r * cols + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        self.tape.checked(
            "layer_norm",
            Tensor::from_parts(a.shape().to_vec(), y),
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> TensorResult<Var<'t>> {
        let a = self.value();
        let (rows, cols) = a.as_matrix_dims();
        if start >= end || end > rows {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: end,
                size: rows,
            });
        }
        let data = a.data()[start * cols..end * cols].to_vec();
        Ok(self.tape.push(
            Tensor::from_parts(vec![end - start, cols], data),
            Op::SliceRows { x: self.id, start },
            self.requires_grad(),
        ))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> TensorResult<Var<'t>> {
        let a = self.value();
        let (rows, cols) = a.as_matrix_dims();
        if start >= end || end > cols {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: end,
                size: cols,
            });
        }
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&a.row(r)[start..end]);
        }
        Ok(self.tape.push(
            Tensor::from_parts(vec![rows, end - start], data),
            Op::SliceCols { x: self.id, start },
            self.requires_grad(),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> TensorResult<Var<'t>> {
        let a = (*self.value()).clone().reshaped(shape)?;
        Ok(self
            .tape
            .push(a, Op::Reshape(self.id), self.requires_grad()))
    }

    pub fn sum(&self) -> TensorResult<Var<'t>> {
        let s = self.value().sum();
        self.tape.checked(
            "sum",
            Tensor::scalar(s),
            Op::Sum(self.id),
            self.requires_grad(),
        )
    }

    pub fn mean(&self) -> TensorResult<Var<'t>> {
        let a = self.value();
        let m = a.sum() / a.numel() as f64;
        self.tape.checked(
            "mean",
            Tensor::scalar(m),
            Op::Mean(self.id),
            self.requires_grad(),
        )
    }

    /// Softmax cross-entropy of `(rows, vocab)` logits. Rows whose target is
    /// `None` are ignored; [`Reduction::Mean`] divides by the scored count.
    pub fn cross_entropy(
        &self,
        targets: &[Option<usize>],
        reduction: Reduction,
    ) -> TensorResult<Var<'t>> {
        let a = self.value();
        let (rows, vocab) = a.as_matrix_dims();
        if targets.len() != rows {
            return Err(TensorError::Dimension {
                op: "cross_entropy",
                left: a.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; rows * vocab];
        let mut total = 0.0;
        let mut count = 0usize;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= vocab {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: t,
                    size: vocab,
                });
            }
            let xr = a.row(r);
            let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = xr.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            for c in 0..vocab {
                probs[r * vocab + c] = (xr[c] - lse).exp();
            }
            total += lse - xr[t];
            count += 1;
        }
        if count == 0 {
            return Err(TensorError::Contract(
                "cross_entropy with no scored rows".into(),
            ));
        }
        let scale = match reduction {
            Reduction::Mean => 1.0 / count as f64,
            Reduction::Sum => 1.0,
        };
        self.tape.checked(
            "cross_entropy",
            Tensor::scalar(total * scale),
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
                scale,
            },
            self.requires_grad(),
        )
    }
}

/// Mean softmax cross-entropy of `(batch, vocab)` logits against class
/// indices.
pub fn cross_entropy_loss<'t>(logits: &Var<'t>, targets: &[usize]) -> TensorResult<Var<'t>> {
    let t: Vec<Option<usize>> = targets.iter().copied().map(Some).collect();
    logits.cross_entropy(&t, Reduction::Mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn hadamard_values() {
        let tape = Tape::new();
        let a = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let b = tape.constant(t(&[3], &[1.0, 1.0, 1.0]));
        assert_eq!(a.hadamard(&b).unwrap().value().data(), &[1.0, 2.0, 3.0]);
        let a = tape.constant(t(&[2], &[2.0, 3.0]));
        let b = tape.constant(t(&[2], &[4.0, 5.0]));
        assert_eq!(a.hadamard(&b).unwrap().value().data(), &[8.0, 15.0]);
        let c = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(
            a.hadamard(&c),
            Err(TensorError::Dimension { .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let y = tape.constant(t(&[2], &[0.0, 0.0])).softmax(0).unwrap();
        assert_eq!(y.value().data(), &[0.5, 0.5]);
        let y = tape.constant(t(&[2], &[1000.0, 1000.0])).softmax(0).unwrap();
        assert_eq!(y.value().data(), &[0.5, 0.5]);
        let y = tape.constant(t(&[2], &[0.0, 3f64.ln()])).softmax(0).unwrap();
        assert!((y.value().data()[0] - 0.25).abs() < 1e-15);
        assert!((y.value().data()[1] - 0.75).abs() < 1e-15);
        assert!(tape.constant(t(&[2], &[0.0, 0.0])).softmax(1).is_err());
    }

    #[test]
    fn softmax_along_first_axis() {
        let tape = Tape::new();
        let y = tape
            .constant(t(&[2, 2], &[0.0, 1.0, 0.0, 1.0]))
            .softmax(0)
            .unwrap();
        assert_eq!(y.value().data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_examples() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[3, 100]));
        let loss = cross_entropy_loss(&logits, &[0, 5, 99]).unwrap();
        assert!((loss.value().item() - 100f64.ln()).abs() < 1e-12);

        let mut data = vec![0.0; 10];
        data[3] = 50.0;
        let logits = tape.constant(t(&[1, 10], &data));
        assert!(cross_entropy_loss(&logits, &[3]).unwrap().value().item() < 1e-9);
        assert!(matches!(
            cross_entropy_loss(&logits, &[10]),
            Err(TensorError::Index { .. })
        ));
    }

    #[test]
    fn backward_simple_derivatives() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, -1.0]));
        let loss = x.sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);

        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 3.0]));
        let loss = x.hadamard(&x).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::Contract(_))
        ));
    }

    #[test]
    fn non_finite_results_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[1], &[1e200]));
        assert!(matches!(
            x.hadamard(&x).unwrap_err(),
            TensorError::NonFinite { .. }
        ));
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.insert("base/w", t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let a = store.insert("lora/a", t(&[2, 2], &[0.5, 0.0, 0.0, 0.5]));
        store.set_frozen("base/", true);
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 1.0]));
        let wv = tape.param(&store, w);
        let av = tape.param(&store, a);
        let loss = x.matmul(&wv).unwrap().matmul(&av).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.param(w).is_none());
        assert!(g.param(a).is_some());
    }

    #[test]
    fn masked_softmax_zeroes_hidden_entries() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 1.0, 1.0, 9.0]));
        let y = x
            .masked_softmax(&[true, true, false, true, true, false])
            .unwrap();
        let v = y.value();
        assert_eq!(v.data()[2], 0.0);
        assert_eq!(v.data()[5], 0.0);
        assert!((v.data()[3] - 0.5).abs() < 1e-15);
        assert!(x.masked_softmax(&[false; 6]).is_err());
    }
}
