use statrs::function::gamma::gamma_ur;

use crate::error::{Error, Result};

fn check_records(n: usize, time: &[f64], event: &[bool]) -> Result<()> {
    for len in [time.len(), event.len()] {
        if len != n {
            return Err(Error::LengthMismatch { left: n, right: len });
        }
    }
    if time.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(Error::InvalidParameter("survival times must be positive and finite".into()));
    }
    Ok(())
}

/// Fenwick tree of counts over risk ranks.
struct Counts(Vec<u64>);

impl Counts {
    fn add(&mut self, mut i: usize) {
        i += 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Number of inserted ranks `< i`.
    fn below(&self, mut i: usize) -> u64 {
        let mut s = 0;
        while i > 0 {
            s += self.0[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Harrell's concordance index. A pair (i, j) is comparable when subject i
/// has an observed event and `time_i < time_j`; it is concordant when
/// `risk_i > risk_j`, and a risk tie counts one half.
pub fn concordance_index(risks: &[f64], time: &[f64], event: &[bool]) -> Result<f64> {
    let n = risks.len();
    check_records(n, time, event)?;
    if risks.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("concordance_index"));
    }
    // Dense risk ranks.
    let mut sorted: Vec<f64> = risks.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let rank = |r: f64| sorted.partition_point(|&v| v < r);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| time[b].total_cmp(&time[a]));
    let mut tree = Counts(vec![0; sorted.len() + 1]);
    let (mut inserted, mut concordant, mut tied, mut pairs) = (0u64, 0u64, 0u64, 0u64);
    let mut start = 0;
    while start < n {
        let mut end = start;
        while end < n && time[order[end]] == time[order[start]] {
            end += 1;
        }
        // Everyone already in the tree has a strictly later time.
        for &i in &order[start..end] {
            if event[i] {
                let r = rank(risks[i]);
                let lower = tree.below(r);
                let lower_or_equal = tree.below(r + 1);
                concordant += lower;
                tied += lower_or_equal - lower;
                pairs += inserted;
            }
        }
        for &i in &order[start..end] {
            tree.add(rank(risks[i]));
            inserted += 1;
        }
        start = end;
    }
    if pairs == 0 {
        return Err(Error::NoComparablePairs);
    }
    Ok((2 * concordant + tied) as f64 / (2 * pairs) as f64)
}

/// k-sample log-rank chi-square statistic and its degrees of freedom.
/// Group ids must cover `0..g` with every group nonempty.
pub fn logrank_statistic(groups: &[usize], time: &[f64], event: &[bool]) -> Result<(f64, usize)> {
    let n = groups.len();
    check_records(n, time, event)?;
    let g = groups.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; g];
    for &id in groups {
        sizes[id] += 1;
    }
    if let Some(empty) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::EmptyGroup(empty));
    }
    if g < 2 {
        return Err(Error::InvalidParameter("log-rank needs at least two groups".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| time[a].total_cmp(&time[b]));
    let mut at_risk: Vec<f64> = sizes.iter().map(|&s| s as f64).collect();
    let mut diff = vec![0.0; g];
    let mut var = vec![vec![0.0; g]; g];
    let mut start = 0;
    while start < n {
        let mut end = start;
        while end < n && time[order[end]] == time[order[start]] {
            end += 1;
        }
        let mut deaths = vec![0.0; g];
        let mut leaving = vec![0.0; g];
        for &i in &order[start..end] {
            leaving[groups[i]] += 1.0;
            if event[i] {
                deaths[groups[i]] += 1.0;
            }
        }
        let d: f64 = deaths.iter().sum();
        let total: f64 = at_risk.iter().sum();
        if d > 0.0 {
            for j in 0..g {
                diff[j] += deaths[j] - d * at_risk[j] / total;
            }
            if total > 1.0 {
                let f = d * (total - d) / (total - 1.0);
                for j in 0..g {
                    let pj = at_risk[j] / total;
                    for l in 0..g {
                        let pl = at_risk[l] / total;
                        let delta = if j == l { 1.0 } else { 0.0 };
                        var[j][l] += f * pj * (delta - pl);
                    }
                }
            }
        }
        for j in 0..g {
            at_risk[j] -= leaving[j];
        }
        start = end;
    }
    // Drop the last group (the covariance matrix has rank g − 1) and solve.
    let m = g - 1;
    let mut a: Vec<Vec<f64>> = (0..m).map(|j| var[j][..m].to_vec()).collect();
    let mut b: Vec<f64> = diff[..m].to_vec();
    let x = solve_symmetric(&mut a, &mut b);
    let stat: f64 = x.iter().zip(&diff[..m]).map(|(x, d)| x * d).sum();
    Ok((stat.max(0.0), m))
}

/// Gaussian elimination with partial pivoting; components along vanishing
/// pivots are set to zero.
fn solve_symmetric(a: &mut [Vec<f64>], b: &mut [f64]) -> Vec<f64> {
    let m = b.len();
    let scale = a.iter().flatten().fold(0.0f64, |s, v| s.max(v.abs())).max(1e-300);
    let mut pivots = vec![true; m];
    for c in 0..m {
        let p = (c..m)
            .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
            .expect("nonempty range");
        if a[p][c].abs() <= 1e-12 * scale {
            pivots[c] = false;
            continue;
        }
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..m {
            let f = a[r][c] / a[c][c];
            if f != 0.0 {
                for k in c..m {
                    a[r][k] -= f * a[c][k];
                }
                b[r] -= f * b[c];
            }
        }
    }
    let mut x = vec![0.0; m];
    for c in (0..m).rev() {
        if !pivots[c] {
            continue;
        }
        let s: f64 = (c + 1..m).map(|k| a[c][k] * x[k]).sum();
        x[c] = (b[c] - s) / a[c][c];
    }
    x
}

/// Upper tail `P(X > x)` of a chi-square distribution with `df` degrees of freedom.
pub fn chi_square_sf(x: f64, df: usize) -> f64 {
    if df == 0 {
        return if x > 0.0 { 0.0 } else { 1.0 };
    }
    if x <= 0.0 {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    gamma_ur(df as f64 / 2.0, x / 2.0)
}

/// Splits subjects into contiguous risk groups (0 = lowest risk) whose sizes
/// follow `proportions`, using largest-remainder rounding.
pub fn hazard_group_split(risks: &[f64], proportions: &[f64]) -> Result<Vec<usize>> {
    if proportions.is_empty() || proportions.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
        return Err(Error::BadProportions("proportions must be positive".into()));
    }
    let total: f64 = proportions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::BadProportions(format!("proportions sum to {total}, not 1")));
    }
    if risks.iter().any(|r| r.is_nan()) {
        return Err(Error::NonFinite("hazard_group_split"));
    }
    let n = risks.len();
    let quotas: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut rest = n - sizes.iter().sum::<usize>().min(n);
    let mut by_remainder: Vec<usize> = (0..sizes.len()).collect();
    by_remainder.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &g in by_remainder.iter().cycle() {
        if rest == 0 {
            break;
        }
        sizes[g] += 1;
        rest -= 1;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| risks[a].total_cmp(&risks[b]));
    let mut out = vec![0; n];
    let mut pos = 0;
    for (g, &s) in sizes.iter().enumerate() {
        for &i in &order[pos..pos + s] {
            out[i] = g;
        }
        pos += s;
    }
    Ok(out)
}

/// One step of a Kaplan–Meier curve.
#[derive(Clone, Debug, PartialEq)]
pub struct KmPoint {
    pub time: f64,
    pub at_risk: usize,
    pub events: usize,
    pub survival: f64,
}

/// Kaplan–Meier estimate evaluated at each distinct event time.
pub fn kaplan_meier(time: &[f64], event: &[bool]) -> Result<Vec<KmPoint>> {
    check_records(time.len(), time, event)?;
    let n = time.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| time[a].total_cmp(&time[b]));
    let mut at_risk = n;
    let mut survival = 1.0;
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = start;
        while end < n && time[order[end]] == time[order[start]] {
            end += 1;
        }
        let events = order[start..end].iter().filter(|&&i| event[i]).count();
        if events > 0 {
            survival *= 1.0 - events as f64 / at_risk as f64;
            out.push(KmPoint {
                time: time[order[start]],
                at_risk,
                events,
                survival,
            });
        }
        at_risk -= end - start;
        start = end;
    }
    Ok(out)
}

/// Kaplan–Meier curves per group id, ordered by id.
pub fn kaplan_meier_by_group(groups: &[usize], time: &[f64], event: &[bool]) -> Result<Vec<(usize, Vec<KmPoint>)>> {
    check_records(groups.len(), time, event)?;
    let mut ids: Vec<usize> = groups.to_vec();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter()
        .map(|g| {
            let rows: Vec<usize> = (0..groups.len()).filter(|&i| groups[i] == g).collect();
            let t: Vec<f64> = rows.iter().map(|&i| time[i]).collect();
            let e: Vec<bool> = rows.iter().map(|&i| event[i]).collect();
            Ok((g, kaplan_meier(&t, &e)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    #[test]
    fn concordance_examples() {
        let t = [1.0, 2.0, 3.0, 4.0];
        let e = [true; 4];
        assert_eq!(concordance_index(&[4.0, 3.0, 2.0, 1.0], &t, &e).unwrap(), 1.0);
        assert_eq!(concordance_index(&[1.0; 4], &t, &e).unwrap(), 0.5);
        assert!(matches!(
            concordance_index(&[1.0, 2.0], &[1.0, 2.0], &[false, false]),
            Err(Error::NoComparablePairs)
        ));
        // Hand count: comparable pairs (0,1),(0,2),(0,3),(0,4),(2,3),(2,4),(3,4) with risk
        // comparisons 1,1,0,1, tie,1, 0 → (4 + 0.5) / 7.
        let r = [0.9, 0.1, 0.5, 0.5, 0.7];
        let t = [1.0, 5.0, 2.0, 3.0, 4.0];
        let e = [true, false, true, true, false];
        let v = concordance_index(&r, &t, &e).unwrap();
        let pairs = [(0, 1), (0, 2), (0, 3), (0, 4), (2, 3), (2, 4), (3, 1), (3, 4), (2, 1)];
        let mut s = 0.0;
        for (i, j) in pairs {
            s += if r[i] > r[j] { 1.0 } else if r[i] == r[j] { 0.5 } else { 0.0 };
        }
        assert_eq!(v, s / pairs.len() as f64);
        assert_eq!(v, 6.5 / 9.0);
    }

    #[test]
    fn logrank_examples() {
        let t = [1.0, 2.0, 3.0, 1.0, 2.0, 3.0];
        let e = [true, false, true, true, false, true];
        let (stat, df) = logrank_statistic(&[0, 0, 0, 1, 1, 1], &t, &e).unwrap();
        assert_eq!(df, 1);
        assert!(stat.abs() < 1e-14);

        // One event in group 0 at the first time, 2 vs 3 at risk:
        // O − E = 1 − 2/5, V = (2/5)(3/5).
        let t = [1.0, 2.0, 3.0, 4.0, 5.0];
        let e = [true, false, false, false, false];
        let (stat, _) = logrank_statistic(&[0, 0, 1, 1, 1], &t, &e).unwrap();
        let expected = (0.6f64 * 0.6) / (0.4 * 0.6);
        assert!((stat - expected).abs() < 1e-12);

        assert!(matches!(logrank_statistic(&[0, 2], &[1.0, 2.0], &[true, true]), Err(Error::EmptyGroup(1))));
    }

    #[test]
    fn chi_square_tail() {
        assert!((chi_square_sf(3.841458820694124, 1) - 0.05).abs() < 1e-12);
        assert!((chi_square_sf(2.0, 2) - (-1.0f64).exp()).abs() < 1e-14);
        assert_eq!(chi_square_sf(0.0, 3), 1.0);
    }

    #[test]
    fn group_split_examples() {
        assert_eq!(hazard_group_split(&[1.0, 2.0, 3.0, 4.0], &[0.5, 0.5]).unwrap(), vec![0, 0, 1, 1]);
        assert_eq!(hazard_group_split(&[3.0, 1.0], &[1.0]).unwrap(), vec![0, 0]);
        let mut r = SplitMix64::new(1);
        let risks: Vec<f64> = (0..654).map(|_| r.normal()).collect();
        let props = [65.0 / 654.0, 316.0 / 654.0, 273.0 / 654.0];
        let groups = hazard_group_split(&risks, &props).unwrap();
        let sizes: Vec<usize> = (0..3).map(|g| groups.iter().filter(|&&x| x == g).count()).collect();
        assert_eq!(sizes, vec![65, 316, 273]);
        assert!(matches!(hazard_group_split(&risks, &[0.5, 0.4]), Err(Error::BadProportions(_))));
        assert!(matches!(hazard_group_split(&risks, &[1.5, -0.5]), Err(Error::BadProportions(_))));
        // Ties keep index order.
        assert_eq!(hazard_group_split(&[1.0, 1.0, 1.0], &[1.0 / 3.0, 2.0 / 3.0]).unwrap(), vec![0, 1, 1]);
    }

    #[test]
    fn kaplan_meier_steps() {
        let km = kaplan_meier(&[1.0, 2.0, 2.0, 3.0], &[true, true, false, true]).unwrap();
        assert_eq!(km.len(), 3);
        assert_eq!(km[0].survival, 0.75);
        assert_eq!(km[1].at_risk, 3);
        assert!((km[1].survival - 0.5).abs() < 1e-15);
        assert_eq!(km[2].survival, 0.0);
        let by = kaplan_meier_by_group(&[1, 0, 1, 0], &[1.0, 2.0, 3.0, 4.0], &[true; 4]).unwrap();
        assert_eq!(by.iter().map(|(g, _)| *g).collect::<Vec<_>>(), vec![0, 1]);
    }

    proptest! {
        #[test]
        fn concordance_complement(
            rows in proptest::collection::vec((0.1f64..10.0, proptest::bool::ANY), 2..30),
            seed in 0u64..1000,
        ) {
            let mut rng = SplitMix64::new(seed);
            let risks: Vec<f64> = rows.iter().map(|_| rng.normal()).collect();
            let neg: Vec<f64> = risks.iter().map(|r| -r).collect();
            let (t, e): (Vec<f64>, Vec<bool>) = rows.into_iter().unzip();
            if let Ok(c) = concordance_index(&risks, &t, &e) {
                let d = concordance_index(&neg, &t, &e).unwrap();
                prop_assert!((c + d - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn logrank_relabel_invariant(
            rows in proptest::collection::vec((0.1f64..10.0, proptest::bool::ANY, 0usize..3), 6..30),
        ) {
            let t: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let e: Vec<bool> = rows.iter().map(|r| r.1).collect();
            let g: Vec<usize> = rows.iter().map(|r| r.2).collect();
            if (0..3).all(|id| g.contains(&id)) {
                let (a, _) = logrank_statistic(&g, &t, &e).unwrap();
                let perm = [2, 0, 1];
                let h: Vec<usize> = g.iter().map(|&x| perm[x]).collect();
                let (b, _) = logrank_statistic(&h, &t, &e).unwrap();
                prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
            }
        }
    }
}
