//! Dense row-major matrices.

use std::any::TypeId;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major matrix. Rows are objects, columns are features.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// How the right operand of an element-wise op is expanded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    Row,
    Col,
    Scalar,
}

pub(crate) fn broadcast_kind(
    op: &'static str,
    a: (usize, usize),
    b: (usize, usize),
) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::Same)
    } else if b == (1, 1) {
        Ok(Broadcast::Scalar)
    } else if b.0 == 1 && b.1 == a.1 {
        Ok(Broadcast::Row)
    } else if b.1 == 1 && b.0 == a.0 {
        Ok(Broadcast::Col)
    } else {
        Err(Error::ShapeMismatch {
            op,
            left: a,
            right: b,
        })
    }
}

/// Dot product with four independent accumulators (fixed summation order).
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Products below this many multiply-adds stay on the simple loops.
const GEMM_MIN_WORK: usize = 4096;

/// `C = op(A)·op(B)` through the blocked kernels for `f32`/`f64`.
/// `a` is `m×k` after `op`, `b` is `k×n`; `(rs, cs)` are element strides of the
/// stored operands. Returns `None` for other scalar types.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (isize, isize),
    b: &[T],
    (rsb, csb): (isize, isize),
) -> Option<Vec<T>> {
    let mut out = vec![T::zero(); m * n];
    let (rsc, csc) = (n as isize, 1);
    let id = TypeId::of::<T>();
    // SAFETY: the TypeId check proves T is exactly the pointer type cast to; the
    // strides describe the buffers' true row-major layouts.
    unsafe {
        if id == TypeId::of::<f64>() {
            matrixmultiply::dgemm(
                m, k, n, 1.0,
                a.as_ptr() as *const f64, rsa, csa,
                b.as_ptr() as *const f64, rsb, csb,
                0.0,
                out.as_mut_ptr() as *mut f64, rsc, csc,
            );
        } else if id == TypeId::of::<f32>() {
            matrixmultiply::sgemm(
                m, k, n, 1.0,
                a.as_ptr() as *const f32, rsa, csa,
                b.as_ptr() as *const f32, rsb, csb,
                0.0,
                out.as_mut_ptr() as *mut f32, rsc, csc,
            );
        } else {
            return None;
        }
    }
    Some(out)
}

/// `Σ (a_f − b_f)²`, symmetric in its arguments bit for bit.
pub(crate) fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            let d = x[l] - y[l];
            acc[l] += d * d;
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        let d = *x - *y;
        tail += d * d;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * *xv;
    }
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn scalar(v: T) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "from_rows",
                    left: (rows.len(), cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// 1×n matrix.
    pub fn row_vector(v: &[T]) -> Self {
        Self {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    /// n×1 matrix.
    pub fn col_vector(v: &[T]) -> Self {
        Self {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    /// Value of a 1×1 matrix (or the first entry).
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64_lossy()).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn reshaped(mut self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape(),
                right: (rows, cols),
            });
        }
        self.rows = rows;
        self.cols = cols;
        Ok(self)
    }

    /// Applies `f(a_ij, b_ij)` with `b` expanded according to the broadcast rule.
    pub(crate) fn zip_broadcast(
        &self,
        other: &Self,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Self> {
        let kind = broadcast_kind(op, self.shape(), other.shape())?;
        let cols = self.cols;
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(idx, &a)| {
                let b = match kind {
                    Broadcast::Same => other.data[idx],
                    Broadcast::Row => other.data[idx % cols],
                    Broadcast::Col => other.data[idx / cols],
                    Broadcast::Scalar => other.data[0],
                };
                f(a, b)
            })
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Sums `self` down to `shape` (inverse of broadcasting).
    pub(crate) fn reduce_to(&self, shape: (usize, usize)) -> Self {
        if shape == self.shape() {
            return self.clone();
        }
        match broadcast_kind("reduce", self.shape(), shape) {
            Ok(Broadcast::Row) => self.sum_cols(),
            Ok(Broadcast::Col) => self.sum_rows(),
            Ok(Broadcast::Scalar) => Self::scalar(self.sum()),
            _ => unreachable!("reduce_to called with non-broadcast shape"),
        }
    }

    fn checked(&self, op: &'static str) -> Result<()> {
        self.ensure_finite(op)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.checked("add")?;
        other.checked("add")?;
        self.zip_broadcast(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.checked("sub")?;
        other.checked("sub")?;
        self.zip_broadcast(other, "sub", |a, b| a - b)
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.checked("mul")?;
        other.checked("mul")?;
        self.zip_broadcast(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_scalar(&self, s: T) -> Self {
        self.map(|v| v + s)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        self.checked("matmul")?;
        other.checked("matmul")?;
        Ok(self.matmul_unchecked(other))
    }

    pub(crate) fn matmul_unchecked(&self, other: &Self) -> Self {
        let (n, k, m) = (self.rows, self.cols, other.cols);
        if n * k * m >= GEMM_MIN_WORK {
            let (a, b) = ((k as isize, 1), (m as isize, 1));
            if let Some(data) = gemm(n, k, m, &self.data, a, &other.data, b) {
                return Self { rows: n, cols: m, data };
            }
        }
        let mut out = Self::zeros(n, m);
        for i in 0..n {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out.data[i * m..(i + 1) * m];
            for (kk, &a) in arow.iter().enumerate() {
                if a != T::zero() {
                    axpy(a, &other.data[kk * m..(kk + 1) * m], orow);
                }
            }
        }
        out
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                op: "matmul_t",
                left: self.shape(),
                right: other.shape(),
            });
        }
        self.checked("matmul_t")?;
        other.checked("matmul_t")?;
        Ok(self.matmul_t_unchecked(other))
    }

    pub(crate) fn matmul_t_unchecked(&self, other: &Self) -> Self {
        let (n, m) = (self.rows, other.rows);
        let k = self.cols;
        if n * k * m >= GEMM_MIN_WORK {
            let (a, b) = ((k as isize, 1), (1, k as isize));
            if let Some(data) = gemm(n, k, m, &self.data, a, &other.data, b) {
                return Self { rows: n, cols: m, data };
            }
        }
        let mut out = Self::zeros(n, m);
        for i in 0..n {
            let a = self.row(i);
            for j in 0..m {
                out.data[i * m + j] = dot(a, other.row(j));
            }
        }
        out
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::ShapeMismatch {
                op: "t_matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        self.checked("t_matmul")?;
        other.checked("t_matmul")?;
        Ok(self.t_matmul_unchecked(other))
    }

    pub(crate) fn t_matmul_unchecked(&self, other: &Self) -> Self {
        let (k, m) = (self.cols, other.cols);
        let r = self.rows;
        if k * r * m >= GEMM_MIN_WORK {
            let (a, b) = ((1, k as isize), (m as isize, 1));
            if let Some(data) = gemm(k, r, m, &self.data, a, &other.data, b) {
                return Self { rows: k, cols: m, data };
            }
        }
        let mut out = Self::zeros(k, m);
        for r in 0..self.rows {
            let orow = other.row(r);
            for (kk, &a) in self.row(r).iter().enumerate() {
                if a != T::zero() {
                    axpy(a, orow, &mut out.data[kk * m..(kk + 1) * m]);
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Softmax along each row, stabilised by subtracting the row maximum.
    pub fn row_softmax(&self) -> Result<Self> {
        self.checked("row_softmax")?;
        let mut out = self.clone();
        for i in 0..self.rows {
            softmax_in_place(out.row_mut(i));
        }
        Ok(out)
    }

    pub fn row_log_softmax(&self) -> Result<Self> {
        self.checked("row_log_softmax")?;
        let mut out = self.clone();
        for i in 0..self.rows {
            let row = out.row_mut(i);
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Ok(out)
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn exp(&self) -> Result<Self> {
        let out = self.map(T::exp);
        out.ensure_finite("exp")?;
        Ok(out)
    }

    pub fn ln(&self) -> Result<Self> {
        let out = self.map(T::ln);
        out.ensure_finite("ln")?;
        Ok(out)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of_usize(self.data.len().max(1))
    }

    /// Sum of each row: n×c → n×1.
    pub fn sum_rows(&self) -> Self {
        let data = (0..self.rows).map(|i| self.row(i).iter().copied().sum()).collect();
        Self {
            rows: self.rows,
            cols: 1,
            data,
        }
    }

    /// Sum of each column: n×c → 1×c.
    pub fn sum_cols(&self) -> Self {
        let mut out = Self::zeros(1, self.cols);
        for i in 0..self.rows {
            for (o, v) in out.data.iter_mut().zip(self.row(i)) {
                *o += *v;
            }
        }
        out
    }

    /// Euclidean norm of each row: n×c → n×1.
    pub fn row_l2_norms(&self) -> Self {
        let data = (0..self.rows)
            .map(|i| {
                let r = self.row(i);
                dot(r, r).sqrt()
            })
            .collect();
        Self {
            rows: self.rows,
            cols: 1,
            data,
        }
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Square submatrix on `idx × idx`.
    pub fn submatrix(&self, idx: &[usize]) -> Self {
        Self::from_fn(idx.len(), idx.len(), |a, b| self[(idx[a], idx[b])])
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn frobenius_norm(&self) -> T {
        dot(&self.data, &self.data).sqrt()
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(v: &[T]) -> T {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    let s: T = v.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_by_identity() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(a.matmul(&Matrix::identity(2)).unwrap(), a);
    }

    #[test]
    fn relu_clamps_negatives() {
        assert_eq!(m(&[&[-1.0, 0.0, 2.0]]).relu(), m(&[&[0.0, 0.0, 2.0]]));
    }

    #[test]
    fn softmax_closed_form() {
        let s = m(&[&[0.0, 3f64.ln()]]).row_softmax().unwrap();
        assert!((s[(0, 0)] - 0.25).abs() < 1e-15);
        assert!((s[(0, 1)] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_survives_large_inputs() {
        let s = m(&[&[1000.0, 1000.0]]).row_softmax().unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn shape_errors() {
        let a = Matrix::<f64>::zeros(2, 3);
        let b = Matrix::<f64>::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(
            a.add(&Matrix::zeros(3, 2)),
            Err(Error::ShapeMismatch { .. })
        ));
        // 1-row and 1-col operands broadcast; anything else is an error.
        assert!(a.add(&Matrix::zeros(1, 3)).is_ok());
        assert!(a.add(&Matrix::zeros(2, 1)).is_ok());
        assert!(a.add(&Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn non_finite_inputs_rejected() {
        let a = m(&[&[f64::NAN, 1.0]]);
        assert!(matches!(a.add(&a), Err(Error::NonFinite(_))));
        assert!(matches!(a.row_softmax(), Err(Error::NonFinite(_))));
        assert!(matches!(m(&[&[-1.0]]).ln(), Err(Error::NonFinite(_))));
    }

    #[test]
    fn transposed_products_agree() {
        let a = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let b = m(&[&[0.5, -1.0, 2.0], &[1.0, 1.0, 1.0]]);
        let direct = a.matmul(&b.transpose()).unwrap();
        assert_eq!(a.matmul_t(&b).unwrap(), direct);
        let direct = a.transpose().matmul(&b).unwrap();
        assert_eq!(a.t_matmul(&b).unwrap(), direct);
    }

    proptest! {
        #[test]
        fn shape_algebra(n in 1usize..6, k in 1usize..6, p in 1usize..6, seed in 0u64..1000) {
            let v = |i: usize, j: usize| ((seed as usize + 7 * i + 13 * j) % 11) as f64 - 5.0;
            let a = Matrix::from_fn(n, k, v);
            let b = Matrix::from_fn(k, p, v);
            let c = a.matmul(&b).unwrap();
            prop_assert_eq!(c.shape(), (n, p));
            prop_assert_eq!(a.transpose().shape(), (k, n));
            prop_assert_eq!(a.sum_rows().shape(), (n, 1));
            prop_assert_eq!(a.sum_cols().shape(), (1, k));
            prop_assert_eq!(a.row_l2_norms().shape(), (n, 1));
            let s = a.row_softmax().unwrap();
            for i in 0..n {
                let total: f64 = s.row(i).iter().sum();
                prop_assert!((total - 1.0).abs() <= 1e-12);
                prop_assert!(s.row(i).iter().all(|&x| x > 0.0));
            }
        }
    }
}
