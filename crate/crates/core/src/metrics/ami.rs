use crate::error::{Error, Result};

use super::dense_ids;

/// Contingency table of two labelings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Contingency {
    pub counts: Vec<Vec<usize>>,
    pub row_sums: Vec<usize>,
    pub col_sums: Vec<usize>,
    pub n: usize,
}

impl Contingency {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::LengthMismatch {
                left: a.len(),
                right: b.len(),
            });
        }
        let (da, ka) = dense_ids(a);
        let (db, kb) = dense_ids(b);
        let mut counts = vec![vec![0; kb]; ka];
        for (&i, &j) in da.iter().zip(&db) {
            counts[i][j] += 1;
        }
        let row_sums = counts.iter().map(|r| r.iter().sum()).collect();
        let col_sums = (0..kb).map(|j| counts.iter().map(|r| r[j]).sum()).collect();
        Ok(Self {
            counts,
            row_sums,
            col_sums,
            n: a.len(),
        })
    }
}

fn entropy_of(sizes: &[usize], n: usize) -> f64 {
    let n = n as f64;
    -sizes
        .iter()
        .filter(|&&s| s > 0)
        .map(|&s| {
            let p = s as f64 / n;
            p * p.ln()
        })
        .sum::<f64>()
}

/// Shannon entropy (nats) of a labeling.
pub fn entropy(labels: &[usize]) -> f64 {
    let (dense, k) = dense_ids(labels);
    let mut sizes = vec![0; k];
    for d in dense {
        sizes[d] += 1;
    }
    entropy_of(&sizes, labels.len())
}

fn mi_of(t: &Contingency) -> f64 {
    let n = t.n as f64;
    let mut mi = 0.0;
    for (i, row) in t.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * (n * c / (t.row_sums[i] as f64 * t.col_sums[j] as f64)).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Mutual information (nats).
pub fn mutual_information(a: &[usize], b: &[usize]) -> Result<f64> {
    Ok(mi_of(&Contingency::new(a, b)?))
}

/// `ln k!` for `k = 0..=n`.
fn ln_factorials(n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for k in 1..=n {
        acc += (k as f64).ln();
        out.push(acc);
    }
    out
}

/// Expected mutual information of two labelings with the given cluster sizes
/// under random permutation, summed cell by cell over the hypergeometric
/// distribution of each cell count.
fn expected_mi(t: &Contingency) -> f64 {
    let n = t.n;
    let lf = ln_factorials(n);
    let nf = n as f64;
    let mut emi = 0.0;
    for &a in &t.row_sums {
        for &b in &t.col_sums {
            let lo = (a + b).saturating_sub(n).max(1);
            let hi = a.min(b);
            let base = lf[a] + lf[b] + lf[n - a] + lf[n - b] - lf[n];
            for nij in lo..=hi {
                let x = nij as f64;
                let log_p = base - lf[nij] - lf[a - nij] - lf[b - nij] - lf[n + nij - a - b];
                emi += x / nf * (nf * x / (a as f64 * b as f64)).ln() * log_p.exp();
            }
        }
    }
    emi
}

/// Adjusted mutual information with arithmetic-mean normalization and exact
/// expected mutual information. Returns 0 when the normalizer vanishes.
pub fn adjusted_mutual_information(a: &[usize], b: &[usize]) -> Result<f64> {
    let t = Contingency::new(a, b)?;
    if t.n < 2 {
        return Err(Error::InvalidParameter("AMI needs at least two items".into()));
    }
    let mi = mi_of(&t);
    let emi = expected_mi(&t);
    let ha = entropy_of(&t.row_sums, t.n);
    let hb = entropy_of(&t.col_sums, t.n);
    let denom = 0.5 * (ha + hb) - emi;
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((mi - emi) / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_agreement() {
        let a = [0, 0, 1, 1, 2, 2, 2];
        assert!((adjusted_mutual_information(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = [5, 5, 3, 3, 9, 9, 9];
        assert!((adjusted_mutual_information(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_cluster_is_zero() {
        assert_eq!(adjusted_mutual_information(&[0; 5], &[0; 5]).unwrap(), 0.0);
        assert_eq!(adjusted_mutual_information(&[0; 4], &[0, 1, 0, 1]).unwrap(), 0.0);
    }

    #[test]
    fn six_item_case_matches_reference() {
        // Reference value from an independent implementation of the same definition.
        let v = adjusted_mutual_information(&[0, 0, 0, 1, 1, 1], &[0, 0, 1, 1, 2, 2]).unwrap();
        assert!((v - 0.29879245817089).abs() < 1e-10, "{v}");
    }

    #[test]
    fn entropy_and_mi() {
        assert!((entropy(&[0, 1, 0, 1]) - 2f64.ln()).abs() < 1e-15);
        let mi = mutual_information(&[0, 1, 0, 1], &[0, 1, 0, 1]).unwrap();
        assert!((mi - 2f64.ln()).abs() < 1e-15);
        assert!(mutual_information(&[0], &[0, 1]).is_err());
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(
            pairs in proptest::collection::vec((0usize..4, 0usize..3), 2..40)
        ) {
            let (a, b): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let ab = adjusted_mutual_information(&a, &b).unwrap();
            let ba = adjusted_mutual_information(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-10);
            prop_assert!(ab <= 1.0 + 1e-10);
            let mi = mutual_information(&a, &b).unwrap();
            prop_assert!(mi >= 0.0 && mi <= entropy(&a).min(entropy(&b)) + 1e-12);
            let relabeled: Vec<usize> = a.iter().map(|x| 10 - x).collect();
            let r = adjusted_mutual_information(&relabeled, &b).unwrap();
            prop_assert!((r - ab).abs() < 1e-10);
        }
    }
}
