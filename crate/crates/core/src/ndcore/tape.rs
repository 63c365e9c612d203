//! Minimal reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records one forward pass. Every operation appends a node whose
//! parents already live on the tape, so node order is a topological order and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use affinitynet::{Matrix, Tape};
//!
//! let mut tape = Tape::<f64>::new();
//! let w = tape.param(Matrix::row_vector(&[1.0, 2.0]));
//! let sq = tape.mul(w, w).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(w).unwrap().data(), &[2.0, 4.0]);
//! ```

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ndcore::matrix::{broadcast_kind, dot, Broadcast, Matrix};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    SafeDiv(Var, Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Neg(Var),
    Scale(Var, T),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SumCols(Var),
    RowL2Norm(Var),
    RowSoftmax(Var),
    RowLogSoftmax(Var),
    GatherRows(Var, Vec<usize>),
    GroupSumRows(Var, usize),
    Reshape(Var),
    SliceCols(Var, usize),
    Pick(Var, Vec<usize>),
    CoxNll(Var, Vec<T>, Vec<bool>),
    PairDot(Var, Pairs),
    PairWeightedSqDist(Var, Var, Pairs),
    NeighborSum(Var, Var, Arc<[usize]>),
}

/// Row index pairs shared between a node and its backward pass.
#[derive(Clone, Debug)]
struct Pairs {
    left: Arc<[usize]>,
    right: Arc<[usize]>,
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | SafeDiv(a, b) | MatMul(a, b) | MatMulT(a, b)
            | PairWeightedSqDist(a, b, _) | NeighborSum(a, b, _) => vec![*a, *b],
            Transpose(a) | Relu(a) | Exp(a) | Ln(a) | Sqrt(a) | Square(a) | Neg(a)
            | Scale(a, _) | AddScalar(a) | Sum(a) | Mean(a) | SumRows(a) | SumCols(a)
            | RowL2Norm(a) | RowSoftmax(a) | RowLogSoftmax(a) | GatherRows(a, _)
            | GroupSumRows(a, _) | Reshape(a) | SliceCols(a, _) | Pick(a, _)
            | CoxNll(a, _, _) | PairDot(a, _) => vec![*a],
        }
    }
}

/// A value in the differentiation graph.
#[derive(Clone, Debug)]
pub struct Node<T> {
    value: Matrix<T>,
    grad: Option<Matrix<T>>,
    op: Op<T>,
    requires_grad: bool,
}

impl<T: Scalar> Node<T> {
    pub fn value(&self) -> &Matrix<T> {
        &self.value
    }

    pub fn grad(&self) -> Option<&Matrix<T>> {
        self.grad.as_ref()
    }

    pub fn parents(&self) -> Vec<Var> {
        self.op.parents()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

/// Topologically ordered record of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Matrix<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Resets every accumulated gradient.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        let requires_grad = op
            .parents()
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Element-wise product; `b` may be a 1-row or 1-col operand.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Element-wise `a / b`, defined as 0 wherever `b == 0`.
    pub fn safe_div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.ensure_finite("safe_div")?;
        bv.ensure_finite("safe_div")?;
        let v = av.zip_broadcast(bv, "safe_div", |x, y| {
            if y == T::zero() {
                T::zero()
            } else {
                x / y
            }
        })?;
        Ok(self.push(v, Op::SafeDiv(a, b)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(v, Op::MatMulT(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).relu();
        self.push(v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).exp()?;
        Ok(self.push(v, Op::Exp(a)))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).ln()?;
        Ok(self.push(v, Op::Ln(a)))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(T::sqrt);
        v.ensure_finite("sqrt")?;
        Ok(self.push(v, Op::Sqrt(a)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).add_scalar(s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a))
    }

    /// Row sums: n×c → n×1.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_rows();
        self.push(v, Op::SumRows(a))
    }

    /// Column sums: n×c → 1×c.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_cols();
        self.push(v, Op::SumCols(a))
    }

    pub fn row_l2_norm(&mut self, a: Var) -> Var {
        let v = self.value(a).row_l2_norms();
        self.push(v, Op::RowL2Norm(a))
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).row_softmax()?;
        Ok(self.push(v, Op::RowSoftmax(a)))
    }

    pub fn row_log_softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).row_log_softmax()?;
        Ok(self.push(v, Op::RowLogSoftmax(a)))
    }

    /// Row `r` of the output is row `idx[r]` of `a`; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let n = self.value(a).rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidParameter(format!(
                "gather index {bad} out of range for {n} rows"
            )));
        }
        let v = self.value(a).gather_rows(idx);
        Ok(self.push(v, Op::GatherRows(a, idx.to_vec())))
    }

    fn pairs(&self, a: Var, left: &[usize], right: &[usize]) -> Result<Pairs> {
        let n = self.value(a).rows();
        if left.len() != right.len() {
            return Err(Error::LengthMismatch {
                left: left.len(),
                right: right.len(),
            });
        }
        if let Some(&bad) = left.iter().chain(right).find(|&&i| i >= n) {
            return Err(Error::InvalidParameter(format!(
                "pair index {bad} out of range for {n} rows"
            )));
        }
        Ok(Pairs {
            left: left.into(),
            right: right.into(),
        })
    }

    /// `out_r = a[left_r] · a[right_r]`, an L×1 column.
    pub fn pair_dot(&mut self, a: Var, left: &[usize], right: &[usize]) -> Result<Var> {
        let pairs = self.pairs(a, left, right)?;
        let av = self.value(a);
        let data = left.iter().zip(right).map(|(&i, &j)| dot(av.row(i), av.row(j))).collect();
        let v = Matrix::from_vec(left.len(), 1, data)?;
        Ok(self.push(v, Op::PairDot(a, pairs)))
    }

    /// `out_r = Σ_f (w_f · (a[left_r][f] − a[right_r][f]))²` for a 1×c weight row `w`.
    pub fn pair_weighted_sq_dist(
        &mut self,
        a: Var,
        w: Var,
        left: &[usize],
        right: &[usize],
    ) -> Result<Var> {
        let pairs = self.pairs(a, left, right)?;
        let (av, wv) = (self.value(a), self.value(w));
        if wv.shape() != (1, av.cols()) {
            return Err(Error::ShapeMismatch {
                op: "pair_weighted_sq_dist",
                left: av.shape(),
                right: wv.shape(),
            });
        }
        let w2: Vec<T> = wv.data().iter().map(|&x| x * x).collect();
        let data = left
            .iter()
            .zip(right)
            .map(|(&i, &j)| {
                let mut acc = T::zero();
                for ((x, y), q) in av.row(i).iter().zip(av.row(j)).zip(&w2) {
                    let d = *x - *y;
                    acc += *q * d * d;
                }
                acc
            })
            .collect();
        let v = Matrix::from_vec(left.len(), 1, data)?;
        Ok(self.push(v, Op::PairWeightedSqDist(a, w, pairs)))
    }

    /// `out_i = Σ_t weights[i][t] · a[idx[i·m + t]]` for n×m `weights`.
    pub fn neighbor_sum(&mut self, a: Var, weights: Var, idx: &[usize]) -> Result<Var> {
        let (av, wv) = (self.value(a), self.value(weights));
        let (n, m) = wv.shape();
        if idx.len() != n * m {
            return Err(Error::LengthMismatch {
                left: idx.len(),
                right: n * m,
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= av.rows()) {
            return Err(Error::InvalidParameter(format!(
                "neighbor index {bad} out of range for {} rows",
                av.rows()
            )));
        }
        let mut v = Matrix::zeros(n, av.cols());
        for i in 0..n {
            let out = v.row_mut(i);
            for (t, &wt) in wv.row(i).iter().enumerate() {
                for (o, x) in out.iter_mut().zip(av.row(idx[i * m + t])) {
                    *o += wt * *x;
                }
            }
        }
        Ok(self.push(v, Op::NeighborSum(a, weights, idx.into())))
    }

    /// Sums consecutive groups of `group` rows: (n·group)×c → n×c.
    pub fn group_sum_rows(&mut self, a: Var, group: usize) -> Result<Var> {
        let av = self.value(a);
        if group == 0 || av.rows() % group != 0 {
            return Err(Error::ShapeMismatch {
                op: "group_sum_rows",
                left: av.shape(),
                right: (group, 1),
            });
        }
        let (n, c) = (av.rows() / group, av.cols());
        let mut out = Matrix::zeros(n, c);
        for i in 0..n {
            for t in 0..group {
                let src = av.row(i * group + t);
                for (o, s) in out.row_mut(i).iter_mut().zip(src) {
                    *o += *s;
                }
            }
        }
        Ok(self.push(out, Op::GroupSumRows(a, group)))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let v = self.value(a).clone().reshaped(rows, cols)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start > end || end > av.cols() {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                left: av.shape(),
                right: (start, end),
            });
        }
        let v = Matrix::from_fn(av.rows(), end - start, |i, j| av[(i, start + j)]);
        Ok(self.push(v, Op::SliceCols(a, start)))
    }

    /// Picks entry `(i, cols[i])` of each row: n×c → n×1.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if cols.len() != av.rows() {
            return Err(Error::LengthMismatch {
                left: av.rows(),
                right: cols.len(),
            });
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= av.cols()) {
            return Err(Error::InvalidParameter(format!(
                "pick column {bad} out of range for {} columns",
                av.cols()
            )));
        }
        let data = cols.iter().enumerate().map(|(i, &c)| av[(i, c)]).collect();
        let v = Matrix::from_vec(cols.len(), 1, data)?;
        Ok(self.push(v, Op::Pick(a, cols.to_vec())))
    }

    /// Breslow negative log partial likelihood of an n×1 risk column, averaged over events.
    pub fn cox_nll(&mut self, risks: Var, time: &[T], event: &[bool]) -> Result<Var> {
        let r = self.value(risks);
        if r.cols() != 1 {
            return Err(Error::ShapeMismatch {
                op: "cox_nll",
                left: r.shape(),
                right: (r.rows(), 1),
            });
        }
        if time.len() != r.rows() || event.len() != r.rows() {
            return Err(Error::LengthMismatch {
                left: r.rows(),
                right: time.len().min(event.len()),
            });
        }
        r.ensure_finite("cox_nll")?;
        let (loss, _) = cox_forward(r.data(), time, event)?;
        let v = Matrix::scalar(loss);
        Ok(self.push(v, Op::CoxNll(risks, time.to_vec(), event.to_vec())))
    }

    fn accumulate(&mut self, v: Var, delta: Matrix<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        debug_assert_eq!(delta.shape(), node.value.shape());
        match &mut node.grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += *b;
                }
            }
            None => node.grad = Some(delta),
        }
    }

    /// Propagates d loss / d node into every node that requires a gradient.
    ///
    /// Gradients accumulate into whatever is already stored; call
    /// [`Tape::zero_grad`] between independent backward passes.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::NotScalar {
                rows: shape.0,
                cols: shape.1,
            });
        }
        // Run this pass on empty buffers, then fold in earlier gradients.
        let earlier: Vec<Option<Matrix<T>>> = self.nodes[..=loss.0]
            .iter_mut()
            .map(|n| n.grad.take())
            .collect();
        self.nodes[loss.0].grad = Some(Matrix::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.clone() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            self.propagate(i, &op, &g)?;
        }
        for (i, prev) in earlier.into_iter().enumerate() {
            if let Some(prev) = prev {
                self.accumulate(Var(i), prev);
            }
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, op: &Op<T>, g: &Matrix<T>) -> Result<()> {
        let zero = T::zero();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let gb = g.reduce_to(self.value(*b).shape());
                self.accumulate(*a, g.clone());
                self.accumulate(*b, gb);
            }
            Op::Sub(a, b) => {
                let gb = g.reduce_to(self.value(*b).shape()).map(|x| -x);
                self.accumulate(*a, g.clone());
                self.accumulate(*b, gb);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = g.zip_broadcast(bv, "mul_backward", |x, y| x * y)?;
                let gb = g
                    .zip_broadcast(av, "mul_backward", |x, y| x * y)?
                    .reduce_to(bv.shape());
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::SafeDiv(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let kind = broadcast_kind("safe_div", av.shape(), bv.shape())?;
                let cols = av.cols();
                let pick = |k: usize| match kind {
                    Broadcast::Same => bv.data()[k],
                    Broadcast::Row => bv.data()[k % cols],
                    Broadcast::Col => bv.data()[k / cols],
                    Broadcast::Scalar => bv.data()[0],
                };
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                let mut gfull = Matrix::zeros(av.rows(), av.cols());
                for k in 0..av.len() {
                    let y = pick(k);
                    if y != zero {
                        ga.data_mut()[k] = g.data()[k] / y;
                        gfull.data_mut()[k] = -g.data()[k] * av.data()[k] / (y * y);
                    }
                }
                let gb = gfull.reduce_to(bv.shape());
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::MatMul(a, b) => {
                let ga = g.matmul_t_unchecked(self.value(*b));
                let gb = self.value(*a).t_matmul_unchecked(g);
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::MatMulT(a, b) => {
                let ga = g.matmul_unchecked(self.value(*b));
                let gb = g.t_matmul_unchecked(self.value(*a));
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::Transpose(a) => self.accumulate(*a, g.transpose()),
            Op::Relu(a) => {
                let ga = g.zip_broadcast(self.value(*a), "relu_backward", |x, y| {
                    if y > zero {
                        x
                    } else {
                        zero
                    }
                })?;
                self.accumulate(*a, ga);
            }
            Op::Exp(a) => {
                let ga = g.zip_broadcast(&self.nodes[idx].value, "exp_backward", |x, y| x * y)?;
                self.accumulate(*a, ga);
            }
            Op::Ln(a) => {
                let ga = g.zip_broadcast(self.value(*a), "ln_backward", |x, y| x / y)?;
                self.accumulate(*a, ga);
            }
            Op::Sqrt(a) => {
                let two = T::of(2.0);
                let ga = g.zip_broadcast(&self.nodes[idx].value, "sqrt_backward", |x, y| {
                    if y == zero {
                        zero
                    } else {
                        x / (two * y)
                    }
                })?;
                self.accumulate(*a, ga);
            }
            Op::Square(a) => {
                let two = T::of(2.0);
                let ga = g.zip_broadcast(self.value(*a), "square_backward", |x, y| two * x * y)?;
                self.accumulate(*a, ga);
            }
            Op::Neg(a) => self.accumulate(*a, g.map(|x| -x)),
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(*a, g.map(|x| x * s));
            }
            Op::AddScalar(a) => self.accumulate(*a, g.clone()),
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(*a, Matrix::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = self.value(*a).shape();
                let v = g.item() / T::of_usize((r * c).max(1));
                self.accumulate(*a, Matrix::filled(r, c, v));
            }
            Op::SumRows(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(*a, Matrix::from_fn(r, c, |i, _| g.data()[i]));
            }
            Op::SumCols(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(*a, Matrix::from_fn(r, c, |_, j| g.data()[j]));
            }
            Op::RowL2Norm(a) => {
                let av = self.value(*a);
                let norms = &self.nodes[idx].value;
                let ga = Matrix::from_fn(av.rows(), av.cols(), |i, j| {
                    let nrm = norms.data()[i];
                    if nrm == zero {
                        zero
                    } else {
                        g.data()[i] * av[(i, j)] / nrm
                    }
                });
                self.accumulate(*a, ga);
            }
            Op::RowSoftmax(a) => {
                let y = &self.nodes[idx].value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let inner: T = yr.iter().zip(gr).map(|(p, q)| *p * *q).sum();
                    for (o, (p, q)) in ga.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = *p * (*q - inner);
                    }
                }
                self.accumulate(*a, ga);
            }
            Op::RowLogSoftmax(a) => {
                let y = &self.nodes[idx].value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let total: T = gr.iter().copied().sum();
                    for (o, (p, q)) in ga.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = *q - p.exp() * total;
                    }
                }
                self.accumulate(*a, ga);
            }
            Op::GatherRows(a, rows) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for (k, &src) in rows.iter().enumerate() {
                    for (o, q) in ga.row_mut(src).iter_mut().zip(g.row(k)) {
                        *o += *q;
                    }
                }
                self.accumulate(*a, ga);
            }
            Op::GroupSumRows(a, group) => {
                let (r, c) = self.value(*a).shape();
                let group = *group;
                self.accumulate(*a, Matrix::from_fn(r, c, |i, j| g[(i / group, j)]));
            }
            Op::Reshape(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(*a, g.clone().reshaped(r, c)?);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    for j in 0..g.cols() {
                        ga[(i, start + j)] = g[(i, j)];
                    }
                }
                self.accumulate(*a, ga);
            }
            Op::Pick(a, cols) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for (i, &col) in cols.iter().enumerate() {
                    ga[(i, col)] = g.data()[i];
                }
                self.accumulate(*a, ga);
            }
            Op::PairDot(a, pairs) => {
                let av = self.value(*a);
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                for (r, (&i, &j)) in pairs.left.iter().zip(pairs.right.iter()).enumerate() {
                    let q = g.data()[r];
                    for f in 0..av.cols() {
                        ga[(i, f)] += q * av[(j, f)];
                        ga[(j, f)] += q * av[(i, f)];
                    }
                }
                self.accumulate(*a, ga);
            }
            Op::PairWeightedSqDist(a, w, pairs) => {
                let (av, wv) = (self.value(*a), self.value(*w));
                let c = av.cols();
                let two = T::of(2.0);
                let mut ga = Matrix::zeros(av.rows(), c);
                let mut gw = Matrix::zeros(1, c);
                for (r, (&i, &j)) in pairs.left.iter().zip(pairs.right.iter()).enumerate() {
                    let q = two * g.data()[r];
                    for f in 0..c {
                        let d = av[(i, f)] - av[(j, f)];
                        let wf = wv.data()[f];
                        let s = q * wf * wf * d;
                        ga[(i, f)] += s;
                        ga[(j, f)] -= s;
                        gw.data_mut()[f] += q * wf * d * d;
                    }
                }
                self.accumulate(*a, ga);
                self.accumulate(*w, gw);
            }
            Op::NeighborSum(a, weights, nb) => {
                let (av, wv) = (self.value(*a), self.value(*weights));
                let (n, m) = wv.shape();
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                let mut gw = Matrix::zeros(n, m);
                for i in 0..n {
                    let gi = g.row(i);
                    for t in 0..m {
                        let j = nb[i * m + t];
                        gw[(i, t)] = dot(gi, av.row(j));
                        let wt = wv[(i, t)];
                        for (o, q) in ga.row_mut(j).iter_mut().zip(gi) {
                            *o += wt * *q;
                        }
                    }
                }
                self.accumulate(*a, ga);
                self.accumulate(*weights, gw);
            }
            Op::CoxNll(a, time, event) => {
                let r = self.value(*a);
                let grad = cox_backward(r.data(), time, event)?;
                let scale = g.item();
                let ga = Matrix::from_vec(grad.len(), 1, grad.into_iter().map(|v| v * scale).collect())?;
                self.accumulate(*a, ga);
            }
        }
        Ok(())
    }
}

/// Indices sorted by descending time (stable).
fn descending_time_order<T: Scalar>(time: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..time.len()).collect();
    order.sort_by(|&a, &b| time[b].partial_cmp(&time[a]).unwrap_or(std::cmp::Ordering::Equal));
    order
}

/// Returns the loss and, per subject, the Breslow risk-set sum at its own time
/// (shifted by the max risk).
fn cox_forward<T: Scalar>(risk: &[T], time: &[T], event: &[bool]) -> Result<(T, Vec<T>)> {
    let events = event.iter().filter(|&&e| e).count();
    if events == 0 {
        return Err(Error::NoEvents);
    }
    let shift = risk.iter().copied().fold(T::neg_infinity(), T::max);
    let order = descending_time_order(time);
    let mut set_sum = vec![T::zero(); risk.len()];
    let mut running = T::zero();
    let mut start = 0;
    while start < order.len() {
        let t = time[order[start]];
        let mut end = start;
        while end < order.len() && time[order[end]] == t {
            running += (risk[order[end]] - shift).exp();
            end += 1;
        }
        for &i in &order[start..end] {
            set_sum[i] = running;
        }
        start = end;
    }
    let mut total = T::zero();
    for i in 0..risk.len() {
        if event[i] {
            total += set_sum[i].ln() + shift - risk[i];
        }
    }
    let loss = total / T::of_usize(events);
    if !loss.is_finite() {
        return Err(Error::NonFinite("cox_nll"));
    }
    Ok((loss, set_sum))
}

fn cox_backward<T: Scalar>(risk: &[T], time: &[T], event: &[bool]) -> Result<Vec<T>> {
    let (_, set_sum) = cox_forward(risk, time, event)?;
    let events = T::of_usize(event.iter().filter(|&&e| e).count());
    let shift = risk.iter().copied().fold(T::neg_infinity(), T::max);
    // Ascending time sweep: acc(t) = Σ over events with t_i ≤ t of 1 / S(t_i).
    let mut order = descending_time_order(time);
    order.reverse();
    let mut grad = vec![T::zero(); risk.len()];
    let mut acc = T::zero();
    let mut start = 0;
    while start < order.len() {
        let t = time[order[start]];
        let mut end = start;
        while end < order.len() && time[order[end]] == t {
            end += 1;
        }
        for &i in &order[start..end] {
            if event[i] {
                acc += T::one() / set_sum[i];
            }
        }
        for &k in &order[start..end] {
            let own = if event[k] { T::one() } else { T::zero() };
            grad[k] = ((risk[k] - shift).exp() * acc - own) / events;
        }
        start = end;
    }
    Ok(grad)
}
