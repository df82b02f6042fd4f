//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records one forward pass. Nodes are appended in evaluation
//! order, so the tape is topologically sorted by construction and
//! [`Tape::backward`] is a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Probabilities are clamped here before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    Sum(Var),
    /// Mean over rows of `-ln max(p[y], floor)`.
    CrossEntropy(Var, Vec<usize>),
    /// Mean over rows of `Σ p ln(p / q)` with both sides floored inside the log.
    KlRows(Var, Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
    is_param: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zero when `v` does not
    /// influence the loss or was never marked trainable.
    pub fn wrt(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            is_param: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that is never differentiated (inputs, frozen weights).
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].is_param = true;
        v
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn is_param(&self, v: Var) -> bool {
        self.nodes[v.0].is_param
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMulT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let value = self.value(a).add_row(self.value(bias))?;
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(value, Op::AddRow(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = relu(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).softmax_rows()?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SoftmaxRows(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let value = cross_entropy(self.value(probs), labels)?;
        let rg = self.rg(probs);
        Ok(self.push(
            Matrix::filled(1, 1, value),
            Op::CrossEntropy(probs, labels.to_vec()),
            rg,
        ))
    }

    pub fn kl_rows(&mut self, p: Var, q: Var) -> Result<Var> {
        let value = kl_rows(self.value(p), self.value(q))?;
        let rg = self.rg(p) || self.rg(q);
        Ok(self.push(Matrix::filled(1, 1, value), Op::KlRows(p, q), rg))
    }

    /// Reverse sweep from a `1 × 1` loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {shape:?}"
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..n).rev() {
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(upstream);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let g = upstream.matmul_t(self.value(*b))?;
                        accumulate(&mut grads, *a, g)?;
                    }
                    if self.rg(*b) {
                        let g = self.value(*a).t_matmul(&upstream)?;
                        accumulate(&mut grads, *b, g)?;
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.rg(*a) {
                        let g = upstream.matmul(self.value(*b))?;
                        accumulate(&mut grads, *a, g)?;
                    }
                    if self.rg(*b) {
                        let g = upstream.t_matmul(self.value(*a))?;
                        accumulate(&mut grads, *b, g)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, upstream.clone())?;
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, upstream.clone())?;
                    }
                }
                Op::AddRow(a, bias) => {
                    if self.rg(*bias) {
                        accumulate(&mut grads, *bias, upstream.sum_rows())?;
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, upstream.clone())?;
                    }
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads, *a, upstream.scale(*s))?;
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mut g = upstream.clone();
                    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, g)?;
                }
                Op::SoftmaxRows(a) => {
                    let p = &node.value;
                    let mut g = Matrix::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let pr = p.row(r);
                        let ur = upstream.row(r);
                        let dot: f64 = pr.iter().zip(ur).map(|(a, b)| a * b).sum();
                        for (j, gv) in g.row_mut(r).iter_mut().enumerate() {
                            *gv = pr[j] * (ur[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, g)?;
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut grads, *a, Matrix::filled(r, c, upstream.get(0, 0)))?;
                }
                Op::CrossEntropy(probs, labels) => {
                    let p = self.value(*probs);
                    let scale = upstream.get(0, 0) / p.rows() as f64;
                    let mut g = Matrix::zeros(p.rows(), p.cols());
                    for (r, &y) in labels.iter().enumerate() {
                        let py = p.get(r, y);
                        if py > PROB_FLOOR {
                            g.set(r, y, -scale / py);
                        }
                    }
                    accumulate(&mut grads, *probs, g)?;
                }
                Op::KlRows(p, q) => {
                    let pv = self.value(*p);
                    let qv = self.value(*q);
                    let scale = upstream.get(0, 0) / pv.rows() as f64;
                    if self.rg(*p) {
                        let mut g = Matrix::zeros(pv.rows(), pv.cols());
                        for (k, gv) in g.data_mut().iter_mut().enumerate() {
                            let (pi, qi) = (pv.data()[k], qv.data()[k]);
                            let mut d = pi.max(PROB_FLOOR).ln() - qi.max(PROB_FLOOR).ln();
                            if pi > PROB_FLOOR {
                                d += 1.0;
                            }
                            *gv = scale * d;
                        }
                        accumulate(&mut grads, *p, g)?;
                    }
                    if self.rg(*q) {
                        let mut g = Matrix::zeros(qv.rows(), qv.cols());
                        for (k, gv) in g.data_mut().iter_mut().enumerate() {
                            let (pi, qi) = (pv.data()[k], qv.data()[k]);
                            if qi > PROB_FLOOR {
                                *gv = -scale * pi / qi;
                            }
                        }
                        accumulate(&mut grads, *q, g)?;
                    }
                }
            }
        }

        // Only leaves that were marked trainable keep their gradient.
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.is_param {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Elementwise ReLU; non-positive inputs (including `-0.0`) map to `+0.0`.
pub fn relu(m: &Matrix) -> Matrix {
    m.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Mean over rows of `-ln max(p[y], 1e-12)`.
pub fn cross_entropy(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != probs.rows() {
        return Err(Error::Dimension {
            op: "cross_entropy",
            left: probs.shape(),
            right: (labels.len(), 1),
        });
    }
    if probs.rows() == 0 {
        return Err(Error::contract("cross-entropy of an empty batch"));
    }
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= probs.cols() {
            return Err(Error::contract(format!(
                "label {y} out of range for {} classes",
                probs.cols()
            )));
        }
        total -= probs.get(r, y).max(PROB_FLOOR).ln();
    }
    Ok(total / probs.rows() as f64)
}

/// `Σ p ln(p / q)` for one pair of distributions, with `0 · ln 0 = 0`.
pub fn kl_div(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Dimension {
            op: "kl_div",
            left: (1, p.len()),
            right: (1, q.len()),
        });
    }
    Ok(p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            if pi <= 0.0 {
                0.0
            } else {
                pi * (pi.max(PROB_FLOOR).ln() - qi.max(PROB_FLOOR).ln())
            }
        })
        .sum())
}

/// Mean of [`kl_div`] over matching rows.
pub fn kl_rows(p: &Matrix, q: &Matrix) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(Error::Dimension {
            op: "kl_rows",
            left: p.shape(),
            right: q.shape(),
        });
    }
    if p.rows() == 0 {
        return Err(Error::contract("KL divergence of an empty batch"));
    }
    let mut total = 0.0;
    for r in 0..p.rows() {
        total += kl_div(p.row(r), q.row(r))?;
    }
    Ok(total / p.rows() as f64)
}
