//! Reverse-mode differentiation over [`Tensor2`] values.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends a node to the
//! owning [`Tape`]. Nodes are only ever appended, so node ids are a
//! topological order and [`Tape::backward`] simply walks them in reverse.
//!
//! ```
//! use hiergcd_core::numerics::{Tape, Tensor2};
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor2::scalar(3.0));
//! let y = x.mul(x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).item().unwrap(), 6.0);
//! ```

use std::cell::{Ref, RefCell};

use super::tensor::{dot, Tensor2, LOG_FLOOR};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    L2NormRows { input: usize, norms: Vec<f64> },
    SoftmaxRows(usize),
    LogSoftmaxMasked { input: usize, probs: Tensor2 },
    LogClamped(usize),
    Sum(usize),
    MeanRows(usize),
    WeightedSum { input: usize, weights: Tensor2 },
    SelectRows { input: usize, idx: Vec<usize> },
    ConcatCols(usize, usize),
    RowDot(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor2,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of executed operations.
#[derive(Debug, Default)]
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
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a trainable leaf.
    pub fn param(&self, value: Tensor2) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&self, value: Tensor2) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor2, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Tensor2> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Propagates d(loss)/d(node) back to every node that needs gradient.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss belongs to a different tape".into()));
        }
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.id].value.shape();
        if shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 loss, got {}x{}",
                shape.0, shape.1
            )));
        }
        let mut grads: Vec<Option<Tensor2>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor2::scalar(1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let mut send = |target: usize, contribution: Tensor2| {
                if !nodes[target].needs_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => acc
                        .add_assign(&contribution)
                        .expect("gradient shape matches its node"),
                    slot @ None => *slot = Some(contribution),
                }
            };
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    send(*a, g.matmul_t(val(*b))?);
                    send(*b, val(*a).t_matmul(&g)?);
                }
                Op::MatMulT(a, b) => {
                    // out = a · bᵀ
                    send(*a, g.matmul(val(*b))?);
                    send(*b, g.t_matmul(val(*a))?);
                }
                Op::Transpose(a) => send(*a, g.transpose()),
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    send(*a, g.hadamard(val(*b))?);
                    send(*b, g.hadamard(val(*a))?);
                }
                Op::AddRow(a, row) => {
                    let mut col_sums = Tensor2::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (s, v) in col_sums.data_mut().iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    send(*row, col_sums);
                    send(*a, g);
                }
                Op::Scale(a, s) => send(*a, g.scale(*s)),
                Op::Relu(a) => {
                    send(*a, g.zip_map(val(*a), "relu", |gv, x| if x > 0.0 { gv } else { 0.0 })?)
                }
                Op::L2NormRows { input, norms } => {
                    let y = &node.value;
                    let mut dx = g.clone();
                    for (r, norm) in norms.iter().enumerate() {
                        let gy = dot(g.row(r), y.row(r));
                        for (d, yv) in dx.row_mut(r).iter_mut().zip(y.row(r)) {
                            *d = (*d - yv * gy) / norm;
                        }
                    }
                    send(*input, dx);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut dx = g.clone();
                    for r in 0..y.rows() {
                        let gy = dot(g.row(r), y.row(r));
                        for (d, yv) in dx.row_mut(r).iter_mut().zip(y.row(r)) {
                            *d = yv * (*d - gy);
                        }
                    }
                    send(*a, dx);
                }
                Op::LogSoftmaxMasked { input, probs } => {
                    let mut dx = g.clone();
                    for r in 0..g.rows() {
                        let gs: f64 = g.row(r).iter().sum();
                        for (d, p) in dx.row_mut(r).iter_mut().zip(probs.row(r)) {
                            *d -= p * gs;
                        }
                    }
                    send(*input, dx);
                }
                Op::LogClamped(a) => send(
                    *a,
                    g.zip_map(val(*a), "log", |gv, x| if x > LOG_FLOOR { gv / x } else { 0.0 })?,
                ),
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    send(*a, Tensor2::filled(r, c, g.item()?));
                }
                Op::MeanRows(a) => {
                    let (r, c) = val(*a).shape();
                    let mut dx = Tensor2::zeros(r, c);
                    for i in 0..r {
                        for (d, gv) in dx.row_mut(i).iter_mut().zip(g.row(0)) {
                            *d = gv / r as f64;
                        }
                    }
                    send(*a, dx);
                }
                Op::WeightedSum { input, weights } => send(*input, weights.scale(g.item()?)),
                Op::SelectRows { input, idx } => {
                    let (r, c) = val(*input).shape();
                    let mut dx = Tensor2::zeros(r, c);
                    for (k, &i) in idx.iter().enumerate() {
                        for (d, gv) in dx.row_mut(i).iter_mut().zip(g.row(k)) {
                            *d += gv;
                        }
                    }
                    send(*input, dx);
                }
                Op::ConcatCols(a, b) => {
                    let ca = val(*a).cols();
                    let cb = val(*b).cols();
                    let mut ga = Tensor2::zeros(g.rows(), ca);
                    let mut gb = Tensor2::zeros(g.rows(), cb);
                    for r in 0..g.rows() {
                        ga.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                        gb.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                    }
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::RowDot(a, b) => {
                    let mut ga = val(*b).clone();
                    let mut gb = val(*a).clone();
                    for r in 0..g.rows() {
                        let s = g.get(r, 0);
                        ga.row_mut(r).iter_mut().for_each(|v| *v *= s);
                        gb.row_mut(r).iter_mut().for_each(|v| *v *= s);
                    }
                    send(*a, ga);
                    send(*b, gb);
                }
            }
        }

        let shapes = nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Gradients produced by [`Tape::backward`], keyed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor2>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`; zeros if the loss does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Tensor2 {
        match self.grads.get(var.id).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.id];
                Tensor2::zeros(r, c)
            }
        }
    }

    /// Moves the gradient out, leaving nothing behind for `var`.
    pub fn take(&mut self, var: Var<'_>) -> Tensor2 {
        match self.grads.get_mut(var.id).and_then(|g| g.take()) {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[var.id];
                Tensor2::zeros(r, c)
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor2 {
        self.tape.value_ref(self.id).clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.value_ref(self.id).shape()
    }

    pub fn item(&self) -> Result<f64> {
        self.tape.value_ref(self.id).item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    fn unary(&self, value: Tensor2, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: Var<'t>, value: Tensor2, op: Op) -> Var<'t> {
        let needs = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, needs)
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.with(|a| other.with(|b| a.matmul(b)))?;
        Ok(self.binary(other, v, Op::MatMul(self.id, other.id)))
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.with(|a| other.with(|b| a.matmul_t(b)))?;
        Ok(self.binary(other, v, Op::MatMulT(self.id, other.id)))
    }

    pub fn transpose(&self) -> Var<'t> {
        let v = self.with(|a| a.transpose());
        self.unary(v, Op::Transpose(self.id))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.with(|a| other.with(|b| a.add(b)))?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.with(|a| other.with(|b| a.sub(b)))?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    /// Elementwise product.
    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.with(|a| other.with(|b| a.hadamard(b)))?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    /// Adds a 1 x cols row to every row.
    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        let v = self.with(|a| {
            row.with(|b| {
                if b.rows() != 1 || b.cols() != a.cols() {
                    return Err(Error::shape(
                        "add_row",
                        format!("{}x{} + row {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
                    ));
                }
                let mut out = a.clone();
                for r in 0..a.rows() {
                    for (o, x) in out.row_mut(r).iter_mut().zip(b.row(0)) {
                        *o += x;
                    }
                }
                Ok(out)
            })
        })?;
        Ok(self.binary(row, v, Op::AddRow(self.id, row.id)))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let v = self.with(|a| a.scale(s));
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn relu(&self) -> Var<'t> {
        let v = self.with(|a| a.map(|x| x.max(0.0)));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn l2_normalize_rows(&self) -> Result<Var<'t>> {
        let (v, norms) = self.with(|a| {
            let norms = a.row_norms();
            a.l2_normalize_rows().map(|v| (v, norms))
        })?;
        Ok(self.unary(
            v,
            Op::L2NormRows {
                input: self.id,
                norms,
            },
        ))
    }

    pub fn softmax_rows(&self) -> Var<'t> {
        let v = self.with(|a| a.softmax_rows());
        self.unary(v, Op::SoftmaxRows(self.id))
    }

    /// Row-wise `a_ij - log Σ_{l ∈ include_i} exp(a_il)`.
    ///
    /// Every output entry is defined, but only included entries contribute
    /// to the normalizer. Each row needs at least one included entry.
    pub fn log_softmax_masked(&self, include: &[bool]) -> Result<Var<'t>> {
        let (v, probs) = self.with(|a| -> Result<_> {
            if include.len() != a.rows() * a.cols() {
                return Err(Error::shape(
                    "log_softmax_masked",
                    format!("mask has {} entries for {}x{}", include.len(), a.rows(), a.cols()),
                ));
            }
            let mut out = a.clone();
            let mut probs = Tensor2::zeros(a.rows(), a.cols());
            for r in 0..a.rows() {
                let mask = &include[r * a.cols()..(r + 1) * a.cols()];
                let kept: Vec<f64> = a
                    .row(r)
                    .iter()
                    .zip(mask)
                    .filter(|(_, &m)| m)
                    .map(|(&x, _)| x)
                    .collect();
                if kept.is_empty() {
                    return Err(Error::Contract(format!(
                        "log_softmax_masked: row {r} has no included entries"
                    )));
                }
                let max = kept.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + kept.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                out.row_mut(r).iter_mut().for_each(|x| *x -= lse);
                for (c, &m) in mask.iter().enumerate() {
                    if m {
                        probs.set(r, c, (a.get(r, c) - lse).exp());
                    }
                }
            }
            Ok((out, probs))
        })?;
        Ok(self.unary(
            v,
            Op::LogSoftmaxMasked {
                input: self.id,
                probs,
            },
        ))
    }

    /// `ln(max(x, LOG_FLOOR))` elementwise.
    pub fn log_clamped(&self) -> Var<'t> {
        let v = self.with(|a| a.map(|x| x.max(LOG_FLOOR).ln()));
        self.unary(v, Op::LogClamped(self.id))
    }

    pub fn sum(&self) -> Var<'t> {
        let v = self.with(|a| Tensor2::scalar(a.sum()));
        self.unary(v, Op::Sum(self.id))
    }

    /// Column means: n x m to 1 x m.
    pub fn mean_rows(&self) -> Var<'t> {
        let v = self.with(|a| a.mean_rows());
        self.unary(v, Op::MeanRows(self.id))
    }

    /// `Σ_ij w_ij a_ij` with constant weights.
    pub fn weighted_sum(&self, weights: Tensor2) -> Result<Var<'t>> {
        let v = self.with(|a| {
            a.expect_same_shape(&weights, "weighted_sum")?;
            Ok::<_, Error>(Tensor2::scalar(dot(a.data(), weights.data())))
        })?;
        Ok(self.unary(
            v,
            Op::WeightedSum {
                input: self.id,
                weights,
            },
        ))
    }

    pub fn select_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let v = self.with(|a| a.select_rows(idx))?;
        Ok(self.unary(
            v,
            Op::SelectRows {
                input: self.id,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn concat_cols(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.with(|a| {
            other.with(|b| {
                if a.rows() != b.rows() {
                    return Err(Error::shape(
                        "concat_cols",
                        format!("{} rows vs {} rows", a.rows(), b.rows()),
                    ));
                }
                let mut data = Vec::with_capacity(a.rows() * (a.cols() + b.cols()));
                for r in 0..a.rows() {
                    data.extend_from_slice(a.row(r));
                    data.extend_from_slice(b.row(r));
                }
                Tensor2::new(a.rows(), a.cols() + b.cols(), data)
            })
        })?;
        Ok(self.binary(other, v, Op::ConcatCols(self.id, other.id)))
    }

    /// Per-row inner products: n x d, n x d to n x 1.
    pub fn row_dot(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.with(|a| {
            other.with(|b| {
                a.expect_same_shape(b, "row_dot")?;
                let d = (0..a.rows()).map(|r| dot(a.row(r), b.row(r))).collect();
                Tensor2::new(a.rows(), 1, d)
            })
        })?;
        Ok(self.binary(other, v, Op::RowDot(self.id, other.id)))
    }

    fn with<R>(&self, f: impl FnOnce(&Tensor2) -> R) -> R {
        f(&self.tape.value_ref(self.id))
    }
}
