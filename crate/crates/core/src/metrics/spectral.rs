use crate::error::{Error, Result};
use crate::ndcore::Matrix;
use crate::rng::SplitMix64;

/// Off-diagonal Frobenius norm at which Jacobi sweeps stop.
pub const JACOBI_TOL: f64 = 1e-10;
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// Above this size the bottom eigenvectors come from block subspace
/// iteration instead of a full Jacobi decomposition.
const DENSE_LIMIT: usize = 256;
const SUBSPACE_MAX_ITER: usize = 300;
const SUBSPACE_MIN_BLOCK: usize = 32;
const KMEANS_RESTARTS: usize = 20;
const KMEANS_MAX_ITER: usize = 300;

/// Eigenpairs sorted by ascending eigenvalue; `vectors` holds them as columns.
#[derive(Clone, Debug)]
pub struct Eigen {
    pub values: Vec<f64>,
    pub vectors: Matrix<f64>,
}

fn off_diagonal_norm(a: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[i * n + j] * a[i * n + j];
            }
        }
    }
    s.sqrt()
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
pub fn symmetric_eigen(m: &Matrix<f64>) -> Result<Eigen> {
    let n = m.rows();
    if m.cols() != n {
        return Err(Error::ShapeMismatch {
            op: "symmetric_eigen",
            left: m.shape(),
            right: (n, n),
        });
    }
    m.ensure_finite("symmetric_eigen")?;
    let mut a = m.data().to_vec();
    let mut v = Matrix::<f64>::identity(n).into_vec();
    for _ in 0..JACOBI_MAX_SWEEPS {
        if off_diagonal_norm(&a, n) <= JACOBI_TOL {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i * n + i].total_cmp(&a[j * n + j]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[r * n + order[c]]);
    Ok(Eigen { values, vectors })
}

fn orthonormalize(q: &mut Matrix<f64>) {
    let (n, b) = q.shape();
    for j in 0..b {
        for _ in 0..2 {
            for i in 0..j {
                let dot: f64 = (0..n).map(|r| q[(r, i)] * q[(r, j)]).sum();
                for r in 0..n {
                    let v = q[(r, i)];
                    q[(r, j)] -= dot * v;
                }
            }
        }
        let norm = (0..n).map(|r| q[(r, j)] * q[(r, j)]).sum::<f64>().sqrt();
        if norm > 1e-300 {
            for r in 0..n {
                q[(r, j)] /= norm;
            }
        }
    }
}

/// Top-k eigenvectors (columns) of a symmetric positive semidefinite matrix
/// by block subspace iteration with Rayleigh–Ritz extraction.
fn top_eigenvectors(s: &Matrix<f64>, k: usize, seed: u64) -> Result<Matrix<f64>> {
    let n = s.rows();
    let b = (k + 8).max(SUBSPACE_MIN_BLOCK).min(n);
    let mut rng = SplitMix64::stream(seed, 0x5bec);
    let mut q = Matrix::from_fn(n, b, |_, _| rng.normal());
    orthonormalize(&mut q);
    let mut ritz = q.clone();
    let mut next: Option<Matrix<f64>> = None;
    for iter in 1..=SUBSPACE_MAX_ITER {
        let mut z = match next.take() {
            Some(z) => z,
            None => s.matmul(&q)?,
        };
        orthonormalize(&mut z);
        q = z;
        if iter % 10 != 0 {
            continue;
        }
        let sq = s.matmul(&q)?;
        let t = q.t_matmul(&sq)?;
        let sym = Matrix::from_fn(b, b, |i, j| 0.5 * (t[(i, j)] + t[(j, i)]));
        let eig = symmetric_eigen(&sym)?;
        // Largest eigenvalues last in ascending order.
        let cols: Vec<usize> = (0..b).rev().collect();
        let vtop = Matrix::from_fn(b, b, |i, j| eig.vectors[(i, cols[j])]);
        ritz = q.matmul(&vtop)?;
        let sritz = sq.matmul(&vtop)?;
        let mut worst = 0.0f64;
        for j in 0..k {
            let theta = eig.values[cols[j]];
            let r: f64 = (0..n)
                .map(|i| (sritz[(i, j)] - theta * ritz[(i, j)]).powi(2))
                .sum::<f64>()
                .sqrt();
            worst = worst.max(r);
        }
        q = ritz.clone();
        if worst <= 1e-8 {
            break;
        }
        next = Some(sritz);
    }
    Ok(Matrix::from_fn(n, k, |i, j| ritz[(i, j)]))
}

/// Row-normalized bottom-k eigenvectors of the normalized Laplacian
/// `I − D^{-1/2} G D^{-1/2}`.
pub fn spectral_embedding(g: &Matrix<f64>, k: usize, seed: u64) -> Result<Matrix<f64>> {
    let n = g.rows();
    if g.cols() != n {
        return Err(Error::ShapeMismatch {
            op: "spectral_embedding",
            left: g.shape(),
            right: (n, n),
        });
    }
    if k < 1 || k > n {
        return Err(Error::InvalidParameter(format!("need 1 ≤ k ≤ n, got k = {k}, n = {n}")));
    }
    g.ensure_finite("spectral_embedding")?;
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            asym = asym.max((g[(i, j)] - g[(j, i)]).abs());
        }
    }
    if asym > 1e-8 {
        return Err(Error::NotSymmetric(asym));
    }
    let sym = Matrix::from_fn(n, n, |i, j| 0.5 * (g[(i, j)] + g[(j, i)]));
    if sym.data().iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidParameter("affinities must be nonnegative".into()));
    }
    let mut dinv = Vec::with_capacity(n);
    for i in 0..n {
        let d: f64 = sym.row(i).iter().sum();
        if d <= 0.0 {
            return Err(Error::DegenerateDegree(i));
        }
        dinv.push(1.0 / d.sqrt());
    }
    let vectors = if n <= DENSE_LIMIT {
        let lap = Matrix::from_fn(n, n, |i, j| {
            let id = if i == j { 1.0 } else { 0.0 };
            id - dinv[i] * sym[(i, j)] * dinv[j]
        });
        let eig = symmetric_eigen(&lap)?;
        Matrix::from_fn(n, k, |i, j| eig.vectors[(i, j)])
    } else {
        // 2I − L has the same eigenvectors with the order reversed and is PSD.
        let shifted = Matrix::from_fn(n, n, |i, j| {
            let id = if i == j { 1.0 } else { 0.0 };
            id + dinv[i] * sym[(i, j)] * dinv[j]
        });
        top_eigenvectors(&shifted, k, seed)?
    };
    let mut emb = vectors;
    for i in 0..n {
        let norm = emb.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            emb.row_mut(i).iter_mut().for_each(|v| *v /= norm);
        }
    }
    Ok(emb)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_once(x: &Matrix<f64>, k: usize, rng: &mut SplitMix64) -> (Vec<usize>, f64) {
    let n = x.rows();
    let mut centers: Vec<Vec<f64>> = vec![x.row(rng.below(n)).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.below(n)
        };
        centers.push(x.row(pick).to_vec());
        let c = centers.last().expect("nonempty");
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), c));
        }
    }
    let mut assign = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for (i, slot) in assign.iter_mut().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = sq_dist(x.row(i), center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if *slot != best {
                *slot = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let dim = x.cols();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, &c) in assign.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let inertia = assign
        .iter()
        .enumerate()
        .map(|(i, &c)| sq_dist(x.row(i), &centers[c]))
        .sum();
    (assign, inertia)
}

/// k-means with k-means++ seeding; the restart with the lowest inertia wins.
/// Cluster ids are renumbered in order of first appearance.
pub fn kmeans(x: &Matrix<f64>, k: usize, restarts: usize, seed: u64) -> Result<Vec<usize>> {
    let n = x.rows();
    if k < 1 || k > n {
        return Err(Error::InvalidParameter(format!("need 1 ≤ k ≤ n, got k = {k}, n = {n}")));
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for r in 0..restarts.max(1) {
        let mut rng = SplitMix64::stream(seed, r as u64);
        let (assign, inertia) = kmeans_once(x, k, &mut rng);
        if best.as_ref().map_or(true, |(_, b)| inertia < *b) {
            best = Some((assign, inertia));
        }
    }
    let (assign, _) = best.expect("at least one restart");
    Ok(super::dense_ids(&assign).0)
}

/// Spectral clustering of a nonnegative symmetric affinity matrix into `k` groups.
pub fn spectral_clustering(g: &Matrix<f64>, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 || k > g.rows() {
        return Err(Error::InvalidParameter(format!(
            "need 2 ≤ k ≤ n, got k = {k}, n = {}",
            g.rows()
        )));
    }
    let emb = spectral_embedding(g, k, seed)?;
    kmeans(&emb, k, KMEANS_RESTARTS, seed)
}

/// `(1 + cos(h_i, h_j)) / 2`, the nonnegative cosine affinity used for
/// clustering representations. Zero rows get affinity 1/2 to everything.
pub fn cosine_affinity(h: &Matrix<f64>) -> Matrix<f64> {
    let norms = h.row_l2_norms();
    let n = h.rows();
    let unit = Matrix::from_fn(n, h.cols(), |i, j| {
        let s = norms[(i, 0)];
        if s > 0.0 {
            h[(i, j)] / s
        } else {
            0.0
        }
    });
    let cos = unit.matmul_t(&unit).expect("square product");
    Matrix::from_fn(n, n, |i, j| {
        let c = 0.5 * (cos[(i, j)] + cos[(j, i)]);
        0.5 * (1.0 + c.clamp(-1.0, 1.0))
    })
}

/// Spectral clustering of the rows of `h` under [`cosine_affinity`], without
/// forming the n×n matrix.
///
/// The affinity is `M Mᵀ` with `M = [√½·1, √½·U]` for unit rows `U`, so the
/// leading eigenvectors of `D^{-1/2} G D^{-1/2}` are the left singular vectors
/// of `D^{-1/2} M`, taken from the small `(d+1)×(d+1)` Gram matrix.
pub fn cosine_spectral_clustering(h: &Matrix<f64>, k: usize, seed: u64) -> Result<Vec<usize>> {
    let (n, d) = h.shape();
    if k < 2 || k > n {
        return Err(Error::InvalidParameter(format!(
            "need 2 ≤ k ≤ n, got k = {k}, n = {n}"
        )));
    }
    h.ensure_finite("cosine_spectral_clustering")?;
    let norms = h.row_l2_norms();
    let half = 0.5f64.sqrt();
    let m = Matrix::from_fn(n, d + 1, |i, j| {
        let s = norms[(i, 0)];
        match j {
            0 => half,
            _ if s > 0.0 => half * h[(i, j - 1)] / s,
            _ => 0.0,
        }
    });
    let col_sums = m.sum_cols();
    let deg: Vec<f64> = (0..n)
        .map(|i| m.row(i).iter().zip(col_sums.data()).map(|(a, b)| a * b).sum::<f64>().sqrt())
        .collect();
    let m = Matrix::from_fn(n, d + 1, |i, j| m[(i, j)] / deg[i]);
    let gram = m.t_matmul(&m)?;
    let gram = Matrix::from_fn(d + 1, d + 1, |i, j| 0.5 * (gram[(i, j)] + gram[(j, i)]));
    let eig = symmetric_eigen(&gram)?;
    let top: Vec<usize> = (0..d + 1).rev().take(k).collect();
    let v = Matrix::from_fn(d + 1, top.len(), |i, j| eig.vectors[(i, top[j])]);
    let mut emb = m.matmul(&v)?;
    if top.len() < k {
        emb = Matrix::from_fn(n, k, |i, j| if j < top.len() { emb[(i, j)] } else { 0.0 });
    }
    for i in 0..n {
        let norm = emb.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            emb.row_mut(i).iter_mut().for_each(|v| *v /= norm);
        }
    }
    kmeans(&emb, k, KMEANS_RESTARTS, seed)
}
