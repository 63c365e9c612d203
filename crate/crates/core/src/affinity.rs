//! Attention kernels, neighborhood selection, attention normalization and
//! dynamic affinity-graph mixing.
//!
//! Dense routines here work on plain [`Matrix`] values and build the n×n
//! affinity graphs used to pick neighborhoods. The `tape_*` routines compute
//! the same kernels only on the selected (i, j) pairs, on a [`Tape`], so the
//! attention weights are differentiable without materialising n×n gradients.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::matrix::{dot, sq_dist};
use crate::ndcore::{Matrix, Tape, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    /// `h_i · h_j / (‖h_i‖ ‖h_j‖)`
    Cosine,
    /// `h_i · h_j`
    InnerProduct,
    /// `wᵀ (h_i ‖ h_j)` with `w` of length `2p`
    Perceptron,
    /// `−‖w ⊙ h_i − w ⊙ h_j‖²` with `w` of length `p`
    WeightedL2,
}

impl KernelKind {
    /// Length of the weight vector this kernel needs for `p` input features.
    pub fn param_len(self, p: usize) -> Option<usize> {
        match self {
            KernelKind::Cosine | KernelKind::InnerProduct => None,
            KernelKind::Perceptron => Some(2 * p),
            KernelKind::WeightedL2 => Some(p),
        }
    }

    pub fn is_symmetric(self) -> bool {
        !matches!(self, KernelKind::Perceptron)
    }
}

/// A kernel together with its weight vector (1×len) when it needs one.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelSpec<T> {
    kind: KernelKind,
    params: Option<Matrix<T>>,
}

impl<T: Scalar> KernelSpec<T> {
    pub fn new(kind: KernelKind, params: Option<Matrix<T>>) -> Result<Self> {
        let needs = kind.param_len(1).is_some();
        match (&params, needs) {
            (None, false) => {}
            (Some(w), true) if w.rows() == 1 => {}
            (Some(w), true) => {
                return Err(Error::ShapeMismatch {
                    op: "kernel params",
                    left: w.shape(),
                    right: (1, w.cols()),
                })
            }
            (Some(_), false) => {
                return Err(Error::InvalidParameter(format!(
                    "{kind:?} kernel takes no parameters"
                )))
            }
            (None, true) => {
                return Err(Error::InvalidParameter(format!(
                    "{kind:?} kernel needs a weight vector"
                )))
            }
        }
        Ok(Self { kind, params })
    }

    pub fn cosine() -> Self {
        Self {
            kind: KernelKind::Cosine,
            params: None,
        }
    }

    pub fn inner_product() -> Self {
        Self {
            kind: KernelKind::InnerProduct,
            params: None,
        }
    }

    pub fn perceptron(w: &[T]) -> Self {
        Self {
            kind: KernelKind::Perceptron,
            params: Some(Matrix::row_vector(w)),
        }
    }

    pub fn weighted_l2(w: &[T]) -> Self {
        Self {
            kind: KernelKind::WeightedL2,
            params: Some(Matrix::row_vector(w)),
        }
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn params(&self) -> Option<&Matrix<T>> {
        self.params.as_ref()
    }

    fn checked_params(&self, p: usize) -> Result<Option<&[T]>> {
        match (self.kind.param_len(p), &self.params) {
            (None, _) => Ok(None),
            (Some(len), Some(w)) if w.cols() == len => Ok(Some(w.data())),
            (Some(len), w) => Err(Error::ShapeMismatch {
                op: "kernel params",
                left: (1, len),
                right: w.as_ref().map_or((0, 0), |w| w.shape()),
            }),
        }
    }
}

/// What the cosine kernel does with an all-zero row.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ZeroNormPolicy {
    /// Similarities involving the row are 0; the row is counted.
    #[default]
    Lenient,
    Strict,
}

#[derive(Clone, Debug)]
pub struct KernelScores<T> {
    pub scores: Matrix<T>,
    /// Rows whose norm was zero under the lenient cosine policy.
    pub zero_norm_rows: usize,
}

/// Dense n×n raw affinities `α_ij` of the rows of `h` (lenient cosine policy).
pub fn kernel_scores<T: Scalar>(h: &Matrix<T>, spec: &KernelSpec<T>) -> Result<Matrix<T>> {
    Ok(kernel_scores_with_policy(h, spec, ZeroNormPolicy::Lenient)?.scores)
}

pub fn kernel_scores_with_policy<T: Scalar>(
    h: &Matrix<T>,
    spec: &KernelSpec<T>,
    policy: ZeroNormPolicy,
) -> Result<KernelScores<T>> {
    let rows = KernelRows::new(h, spec, policy)?;
    let n = h.rows();
    let mut data = Vec::with_capacity(n * n);
    for start in (0..n).step_by(ROW_BLOCK) {
        data.extend_from_slice(rows.block(start, (start + ROW_BLOCK).min(n))?.data());
    }
    Ok(KernelScores {
        scores: Matrix::from_vec(n, n, data)?,
        zero_norm_rows: rows.zero_norm_rows,
    })
}

/// Rows per block when kernel scores are produced piecewise.
const ROW_BLOCK: usize = 256;

/// Above this many multiply-adds, a block comes from a matrix product.
const DENSE_GEMM_MIN: usize = 1 << 16;

/// Per-row quantities a kernel needs, so score rows can be produced in blocks
/// without holding the n×n matrix.
struct KernelRows<T> {
    kind: KernelKind,
    /// `h`, or `w ⊙ h` for the weighted-L2 kernel.
    x: Matrix<T>,
    /// Row norms (cosine), squared row norms (weighted L2), or the two
    /// perceptron halves `w1·h_i` followed by `w2·h_i`.
    aux: Vec<T>,
    zero_norm_rows: usize,
}

impl<T: Scalar> KernelRows<T> {
    fn new(h: &Matrix<T>, spec: &KernelSpec<T>, policy: ZeroNormPolicy) -> Result<Self> {
        let (n, p) = h.shape();
        if n == 0 {
            return Err(Error::InvalidParameter("kernel_scores needs n >= 1".into()));
        }
        h.ensure_finite("kernel_scores")?;
        let params = spec.checked_params(p)?;
        let mut zero_norm_rows = 0;
        let (x, aux) = match spec.kind {
            KernelKind::InnerProduct => (h.clone(), Vec::new()),
            KernelKind::Cosine => {
                let norms: Vec<T> = (0..n).map(|i| dot(h.row(i), h.row(i)).sqrt()).collect();
                if let Some(row) = norms.iter().position(|&v| v == T::zero()) {
                    if policy == ZeroNormPolicy::Strict {
                        return Err(Error::ZeroVector { row });
                    }
                    zero_norm_rows = norms.iter().filter(|&&v| v == T::zero()).count();
                }
                (h.clone(), norms)
            }
            KernelKind::WeightedL2 => {
                let w = params.expect("checked");
                let x = Matrix::from_fn(n, p, |i, f| h[(i, f)] * w[f]);
                let sq = (0..n).map(|i| dot(x.row(i), x.row(i))).collect();
                (x, sq)
            }
            KernelKind::Perceptron => {
                let w = params.expect("checked");
                let (w1, w2) = w.split_at(p);
                let mut aux: Vec<T> = (0..n).map(|i| dot(h.row(i), w1)).collect();
                aux.extend((0..n).map(|i| dot(h.row(i), w2)));
                (Matrix::zeros(0, 0), aux)
            }
        };
        Ok(Self {
            kind: spec.kind,
            x,
            aux,
            zero_norm_rows,
        })
    }

    fn n(&self) -> usize {
        match self.kind {
            KernelKind::Perceptron => self.aux.len() / 2,
            _ => self.x.rows(),
        }
    }

    fn small(&self) -> bool {
        let (n, p) = self.x.shape();
        n * n * p < DENSE_GEMM_MIN
    }

    /// Inner products of rows `start..end` with every row.
    fn gram_block(&self, start: usize, end: usize) -> Matrix<T> {
        let (n, p) = self.x.shape();
        if self.small() {
            return Matrix::from_fn(end - start, n, |r, j| dot(self.x.row(start + r), self.x.row(j)));
        }
        let block = Matrix::from_vec(end - start, p, self.x.data()[start * p..end * p].to_vec())
            .expect("block shape");
        block.matmul_t_unchecked(&self.x)
    }

    /// Score rows `start..end`: an (end−start)×n matrix.
    fn block(&self, start: usize, end: usize) -> Result<Matrix<T>> {
        let n = self.n();
        let out = match self.kind {
            KernelKind::InnerProduct => self.gram_block(start, end),
            KernelKind::Cosine => {
                let mut g = self.gram_block(start, end);
                for (r, row) in g.data_mut().chunks_exact_mut(n).enumerate() {
                    let ni = self.aux[start + r];
                    for (v, &nj) in row.iter_mut().zip(&self.aux) {
                        let den = ni * nj;
                        *v = if den == T::zero() {
                            T::zero()
                        } else {
                            (*v / den).max(-T::one()).min(T::one())
                        };
                    }
                }
                g
            }
            KernelKind::WeightedL2 if self.small() => Matrix::from_fn(end - start, n, |r, j| {
                -sq_dist(self.x.row(start + r), self.x.row(j))
            }),
            KernelKind::WeightedL2 => {
                let mut g = self.gram_block(start, end);
                let two = T::of(2.0);
                for (r, row) in g.data_mut().chunks_exact_mut(n).enumerate() {
                    let si = self.aux[start + r];
                    for (v, &sj) in row.iter_mut().zip(&self.aux) {
                        *v = -(si + sj - two * *v).max(T::zero());
                    }
                    row[start + r] = T::zero();
                }
                g
            }
            KernelKind::Perceptron => {
                let (left, right) = self.aux.split_at(n);
                Matrix::from_fn(end - start, n, |r, j| left[start + r] + right[j])
            }
        };
        out.ensure_finite("kernel_scores")?;
        Ok(out)
    }
}

/// Per-row neighbor lists of equal size. Row `i` lists `i` first, then the
/// selected neighbors by descending score, ties by ascending index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Neighborhoods {
    n: usize,
    size: usize,
    idx: Vec<usize>,
}

impl Neighborhoods {
    pub fn from_lists(lists: &[Vec<usize>]) -> Result<Self> {
        let n = lists.len();
        let size = lists.first().map_or(0, Vec::len);
        let mut idx = Vec::with_capacity(n * size);
        for (i, l) in lists.iter().enumerate() {
            if l.len() != size || l.is_empty() || l[0] != i {
                return Err(Error::InvalidParameter(format!(
                    "neighborhood {i} must start with itself and have size {size}"
                )));
            }
            let mut seen = l.clone();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != l.len() || seen.last().is_some_and(|&m| m >= n) {
                return Err(Error::InvalidParameter(format!(
                    "neighborhood {i} has duplicate or out-of-range entries"
                )));
            }
            idx.extend_from_slice(l);
        }
        Ok(Self { n, size, idx })
    }

    /// Every object is its own only neighbor.
    pub fn self_only(n: usize) -> Self {
        Self {
            n,
            size: 1,
            idx: (0..n).collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Neighborhood size, `k + 1`.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn of(&self, i: usize) -> &[usize] {
        &self.idx[i * self.size..(i + 1) * self.size]
    }

    /// Row-major flattening of all neighborhoods (length `n · size`).
    pub fn flat(&self) -> &[usize] {
        &self.idx
    }

    /// `[0, 0, …, 1, 1, …]`: the center of each flattened entry.
    pub fn centers(&self) -> Vec<usize> {
        (0..self.n)
            .flat_map(|i| std::iter::repeat(i).take(self.size))
            .collect()
    }
}

/// `N(i) = {i} ∪ top-k_{j≠i} scores[i][j]`.
pub fn knn_select<T: Scalar>(scores: &Matrix<T>, k: usize) -> Result<Neighborhoods> {
    let n = scores.rows();
    if scores.cols() != n {
        return Err(Error::ShapeMismatch {
            op: "knn_select",
            left: scores.shape(),
            right: (n, n),
        });
    }
    if n == 0 {
        return Err(Error::InvalidParameter("knn_select needs n >= 1".into()));
    }
    if k > n - 1 {
        return Err(Error::KTooLarge { k, n });
    }
    scores.ensure_finite("knn_select")?;
    let mut idx = Vec::with_capacity(n * (k + 1));
    let mut best = Vec::with_capacity(n);
    for i in 0..n {
        select_row(scores.row(i), i, k, &mut best, &mut idx);
    }
    Ok(Neighborhoods { n, size: k + 1, idx })
}

/// Same result as `knn_select(&kernel_scores(h, spec)?, k)` without holding
/// the n×n score matrix.
pub fn knn_from_kernel<T: Scalar>(
    h: &Matrix<T>,
    spec: &KernelSpec<T>,
    k: usize,
) -> Result<Neighborhoods> {
    let rows = KernelRows::new(h, spec, ZeroNormPolicy::Lenient)?;
    let n = h.rows();
    if k > n - 1 {
        return Err(Error::KTooLarge { k, n });
    }
    let mut idx = Vec::with_capacity(n * (k + 1));
    let mut best = Vec::with_capacity(n);
    for start in (0..n).step_by(ROW_BLOCK) {
        let block = rows.block(start, (start + ROW_BLOCK).min(n))?;
        for r in 0..block.rows() {
            select_row(block.row(r), start + r, k, &mut best, &mut idx);
        }
    }
    Ok(Neighborhoods { n, size: k + 1, idx })
}

/// Appends `i` and its `k` best-scoring other indices: descending score,
/// ties by ascending index.
fn select_row<T: Scalar>(
    row: &[T],
    i: usize,
    k: usize,
    best: &mut Vec<(T, usize)>,
    idx: &mut Vec<usize>,
) {
    idx.push(i);
    best.clear();
    if k > 256 {
        best.extend(row.iter().enumerate().filter(|(j, _)| *j != i).map(|(j, &s)| (s, j)));
        let order = |a: &(T, usize), b: &(T, usize)| {
            b.0.partial_cmp(&a.0).expect("finite").then(a.1.cmp(&b.1))
        };
        if k < best.len() {
            best.select_nth_unstable_by(k - 1, order);
            best.truncate(k);
        }
        best.sort_by(order);
    } else if k > 0 {
        for (j, &s) in row.iter().enumerate() {
            if j == i || (best.len() == k && s <= best[k - 1].0) {
                continue;
            }
            // Scanning j upward, an equal score never displaces an earlier index.
            let pos = best.partition_point(|&(b, _)| b >= s);
            best.insert(pos, (s, j));
            best.truncate(k);
        }
    }
    idx.extend(best.iter().map(|&(_, j)| j));
}

/// Scores restricted to each neighborhood: n×(k+1), column 0 is the self score.
pub fn neighbor_scores<T: Scalar>(scores: &Matrix<T>, nbrs: &Neighborhoods) -> Result<Matrix<T>> {
    if scores.shape() != (nbrs.n(), nbrs.n()) {
        return Err(Error::ShapeMismatch {
            op: "neighbor_scores",
            left: scores.shape(),
            right: (nbrs.n(), nbrs.n()),
        });
    }
    Ok(Matrix::from_fn(nbrs.n(), nbrs.size(), |i, t| {
        scores[(i, nbrs.of(i)[t])]
    }))
}

/// Dense row-stochastic attention: softmax of `scores[i][·]` over `N(i)`, zero elsewhere.
pub fn normalize_attention<T: Scalar>(
    scores: &Matrix<T>,
    nbrs: &Neighborhoods,
) -> Result<Matrix<T>> {
    let local = neighbor_scores(scores, nbrs)?.row_softmax()?;
    let n = nbrs.n();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for (t, &j) in nbrs.of(i).iter().enumerate() {
            out[(i, j)] = local[(i, t)];
        }
    }
    Ok(out)
}

/// `G = λ·G_e + (1−λ)·(η·G_curr + (1−η)·G_prev)`, entrywise.
pub fn mix_graphs<T: Scalar>(
    given: Option<&Matrix<T>>,
    current: &Matrix<T>,
    previous: Option<&Matrix<T>>,
    lambda: T,
    eta: T,
) -> Result<Matrix<T>> {
    let unit = |v: T| v >= T::zero() && v <= T::one();
    if !unit(lambda) || !unit(eta) {
        return Err(Error::InvalidParameter(format!(
            "lambda = {lambda}, eta = {eta} must lie in [0, 1]"
        )));
    }
    if lambda > T::zero() && given.is_none() {
        return Err(Error::MissingGraph("a given graph when lambda > 0"));
    }
    if eta < T::one() && previous.is_none() {
        return Err(Error::MissingGraph("a previous-layer graph when eta < 1"));
    }
    for g in [given, previous].into_iter().flatten() {
        if g.shape() != current.shape() {
            return Err(Error::ShapeMismatch {
                op: "mix_graphs",
                left: current.shape(),
                right: g.shape(),
            });
        }
    }
    let node = match previous {
        Some(prev) if eta < T::one() => {
            let keep = T::one() - eta;
            current.zip_broadcast(prev, "mix_graphs", |c, p| eta * c + keep * p)?
        }
        _ => current.clone(),
    };
    match given {
        Some(ge) if lambda > T::zero() => {
            let keep = T::one() - lambda;
            ge.zip_broadcast(&node, "mix_graphs", |g, v| lambda * g + keep * v)
        }
        _ => Ok(node),
    }
}

/// An n×n affinity matrix with the neighborhoods selected from it.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityGraph<T> {
    pub scores: Matrix<T>,
    pub neighborhoods: Neighborhoods,
}

impl<T: Scalar> AffinityGraph<T> {
    pub fn n(&self) -> usize {
        self.neighborhoods.n()
    }

    /// Writes `i,j,score` rows for every selected (i, j) pair.
    pub fn write_edge_list<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "i,j,score")?;
        for i in 0..self.n() {
            for &j in self.neighborhoods.of(i) {
                writeln!(out, "{i},{j},{:.16e}", self.scores[(i, j)].to_f64_lossy())?;
            }
        }
        Ok(())
    }
}

/// Parses `i,j,score` rows (header optional) into `(i, j, score)` triples.
pub fn read_edge_list<R: BufRead>(input: R) -> Result<Vec<(usize, usize, f64)>> {
    let mut edges = Vec::new();
    for (line_no, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (line_no == 0 && line.starts_with('i')) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Ragged {
                line: line_no + 1,
                expected: 3,
                found: fields.len(),
            });
        }
        let bad = |_| Error::Parse(format!("edge list line {}: {line}", line_no + 1));
        edges.push((
            fields[0].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            fields[1].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            fields[2].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
        ));
    }
    Ok(edges)
}

/// Differentiable kernel scores on the selected pairs: n×(k+1).
///
/// `params` must be a 1×len node for the perceptron and weighted-L2 kernels.
/// Cosine uses the lenient zero-norm policy.
pub fn tape_neighbor_scores<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    kind: KernelKind,
    params: Option<Var>,
    nbrs: &Neighborhoods,
) -> Result<Var> {
    let (n, p) = tape.value(h).shape();
    if n != nbrs.n() {
        return Err(Error::LengthMismatch {
            left: n,
            right: nbrs.n(),
        });
    }
    let m = nbrs.size();
    let centers = nbrs.centers();
    let w = match (kind.param_len(p), params) {
        (None, _) => None,
        (Some(len), Some(w)) if tape.value(w).shape() == (1, len) => Some(w),
        (Some(len), w) => {
            return Err(Error::ShapeMismatch {
                op: "tape_neighbor_scores",
                left: (1, len),
                right: w.map_or((0, 0), |w| tape.value(w).shape()),
            })
        }
    };
    let flat = match kind {
        KernelKind::InnerProduct | KernelKind::Cosine => {
            let dots = tape.pair_dot(h, &centers, nbrs.flat())?;
            if kind == KernelKind::Cosine {
                let norms = tape.row_l2_norm(h);
                let ni = tape.gather_rows(norms, &centers)?;
                let nj = tape.gather_rows(norms, nbrs.flat())?;
                let den = tape.mul(ni, nj)?;
                tape.safe_div(dots, den)?
            } else {
                dots
            }
        }
        KernelKind::WeightedL2 => {
            let dist = tape.pair_weighted_sq_dist(h, w.expect("checked"), &centers, nbrs.flat())?;
            tape.neg(dist)
        }
        KernelKind::Perceptron => {
            let w = w.expect("checked");
            let w1 = tape.slice_cols(w, 0, p)?;
            let w2 = tape.slice_cols(w, p, 2 * p)?;
            let left = tape.matmul_t(h, w1)?;
            let right = tape.matmul_t(h, w2)?;
            let li = tape.gather_rows(left, &centers)?;
            let rj = tape.gather_rows(right, nbrs.flat())?;
            tape.add(li, rj)?
        }
    };
    tape.reshape(flat, n, m)
}

/// Softmax-normalized attention over each neighborhood: n×(k+1).
pub fn tape_attention<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    kind: KernelKind,
    params: Option<Var>,
    nbrs: &Neighborhoods,
) -> Result<Var> {
    let scores = tape_neighbor_scores(tape, h, kind, params, nbrs)?;
    tape.row_softmax(scores)
}

/// `out_i = Σ_t attention[i][t] · h[N(i)_t]`.
pub fn tape_pool<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    attention: Var,
    nbrs: &Neighborhoods,
) -> Result<Var> {
    let (n, m) = (nbrs.n(), nbrs.size());
    if tape.value(attention).shape() != (n, m) {
        return Err(Error::ShapeMismatch {
            op: "tape_pool",
            left: tape.value(attention).shape(),
            right: (n, m),
        });
    }
    tape.neighbor_sum(h, attention, nbrs.flat())
}
