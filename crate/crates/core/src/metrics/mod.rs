//! Evaluation metrics: accuracy, adjusted mutual information, spectral
//! clustering, and survival statistics.

mod ami;
mod spectral;
mod survival;

pub use ami::{adjusted_mutual_information, entropy, mutual_information, Contingency};
pub use spectral::{
    cosine_affinity, cosine_spectral_clustering, kmeans, spectral_clustering, spectral_embedding, symmetric_eigen, Eigen,
    JACOBI_MAX_SWEEPS, JACOBI_TOL,
};
pub use survival::{
    chi_square_sf, concordance_index, hazard_group_split, kaplan_meier, kaplan_meier_by_group,
    logrank_statistic, KmPoint,
};

use crate::error::{Error, Result};

/// Fraction of positions where `pred` and `truth` agree.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::InvalidParameter("accuracy of an empty labeling".into()));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Maps arbitrary ids to `0..k` in first-appearance order.
pub(crate) fn dense_ids(ids: &[usize]) -> (Vec<usize>, usize) {
    let mut map = std::collections::HashMap::new();
    let dense = ids
        .iter()
        .map(|&id| {
            let next = map.len();
            *map.entry(id).or_insert(next)
        })
        .collect();
    (dense, map.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 1, 1]).unwrap(), 0.75);
        assert!(matches!(accuracy(&[0], &[0, 1]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn dense_ids_first_appearance() {
        assert_eq!(dense_ids(&[7, 3, 7, 9]), (vec![0, 1, 0, 2], 3));
    }
}
