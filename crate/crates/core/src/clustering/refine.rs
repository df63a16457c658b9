use std::collections::BTreeMap;

use super::{ClusterAssignment, DistanceMatrix, Label};

/// Noise score of `sub` inside `cluster`: the mean distance from `sub` to the
/// rest of the cluster divided by the mean pairwise distance within the cluster.
///
/// `sub == cluster` scores 0 (kept). When the cluster has zero internal spread
/// the score is 0 if `sub` is also at distance 0, otherwise infinite.
pub fn sub_cluster_score(sub: &[usize], cluster: &[usize], dist: &DistanceMatrix) -> f64 {
    let mut in_sub = vec![false; dist.len()];
    for &i in sub {
        in_sub[i] = true;
    }
    let rest: Vec<usize> = cluster.iter().copied().filter(|&j| !in_sub[j]).collect();
    if rest.is_empty() || sub.is_empty() {
        return 0.0;
    }

    let mut cross = 0.0;
    for &i in sub {
        for &j in &rest {
            cross += dist.get(i, j);
        }
    }
    let d_sub = cross / (sub.len() * rest.len()) as f64;

    let mut within = 0.0;
    for (a, &i) in cluster.iter().enumerate() {
        for &j in &cluster[a + 1..] {
            within += dist.get(i, j);
        }
    }
    let pairs = cluster.len() * (cluster.len() - 1) / 2;
    let d_large = within / pairs as f64;

    if d_large == 0.0 {
        return if d_sub == 0.0 { 0.0 } else { f64::INFINITY };
    }
    d_sub / d_large
}

/// Splits each coarse cluster along the fine partition, removing sub-clusters
/// whose noise score reaches 1, then drops clusters smaller than
/// `min_cluster_size`.
pub fn refine(
    coarse: &ClusterAssignment,
    fine: &ClusterAssignment,
    dist: &DistanceMatrix,
    min_cluster_size: usize,
) -> ClusterAssignment {
    refine_with_threshold(coarse, fine, dist, min_cluster_size, 1.0)
}

/// [`refine`] with an explicit removal threshold on the score.
pub fn refine_with_threshold(
    coarse: &ClusterAssignment,
    fine: &ClusterAssignment,
    dist: &DistanceMatrix,
    min_cluster_size: usize,
    threshold: f64,
) -> ClusterAssignment {
    let n = coarse.len();
    // Group ids: each kept coarse remainder keeps slot `c`; split-offs get fresh slots.
    let mut groups: Vec<Label> = vec![None; n];
    let mut next_group = coarse.num_clusters();

    for (c, members) in coarse.members().into_iter().enumerate() {
        // Sub-clusters: fine label restricted to this coarse cluster, with fine
        // noise points as singletons. BTreeMap keeps the order deterministic.
        let mut subs: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for &i in &members {
            let key = match fine.labels()[i] {
                Some(f) => (0, f),
                None => (1, i),
            };
            subs.entry(key).or_default().push(i);
        }
        for sub in subs.values() {
            let rho = sub_cluster_score(sub, &members, dist);
            let group = if rho >= threshold && sub.len() < members.len() {
                next_group += 1;
                next_group - 1
            } else {
                c
            };
            for &i in sub {
                groups[i] = Some(group);
            }
        }
    }
    ClusterAssignment::from_groups(&groups, min_cluster_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::dbscan;

    fn cluster_of(points: &[f64]) -> DistanceMatrix {
        DistanceMatrix::from_points_1d(points)
    }

    #[test]
    fn hand_example_score() {
        let d = cluster_of(&[0.0, 0.1, 0.2, 1.0]);
        let rho = sub_cluster_score(&[3], &[0, 1, 2, 3], &d);
        // D_sub = 2.7 / 3 = 0.9, D_large = 3.1 / 6.
        let expected = 0.9 / (3.1 / 6.0);
        assert!((rho - expected).abs() < 1e-12);
        assert!((rho - 1.742).abs() < 1e-3);
    }

    #[test]
    fn equidistant_cluster_scores_one() {
        let n = 5;
        let mut e = vec![1.0; n * n];
        for i in 0..n {
            e[i * n + i] = 0.0;
        }
        let d = DistanceMatrix::from_entries(n, e).unwrap();
        let all: Vec<usize> = (0..n).collect();
        for sub in [&[0][..], &[1, 2], &[0, 3, 4]] {
            assert!((sub_cluster_score(sub, &all, &d) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn whole_cluster_scores_zero() {
        let d = cluster_of(&[0.0, 1.0, 3.0]);
        assert_eq!(sub_cluster_score(&[0, 1, 2], &[0, 1, 2], &d), 0.0);
    }

    #[test]
    fn zero_spread_cluster() {
        let d = cluster_of(&[2.0, 2.0, 2.0]);
        assert_eq!(sub_cluster_score(&[0], &[0, 1, 2], &d), 0.0);
    }

    #[test]
    fn hand_example_refinement() {
        let d = cluster_of(&[0.0, 0.1, 0.2, 1.0]);
        let coarse = ClusterAssignment::from_groups(&[Some(0); 4], 1);
        let fine = ClusterAssignment::from_groups(&[Some(0), Some(0), Some(0), Some(1)], 1);
        let r = refine(&coarse, &fine, &d, 2);
        assert_eq!(r.labels(), &[Some(0), Some(0), Some(0), None]);
    }

    #[test]
    fn fine_equal_to_coarse_is_identity() {
        let d = cluster_of(&[0.0, 0.1, 0.2, 5.0, 5.1, 9.0]);
        let coarse = dbscan(&d, 0.5, 2);
        let r = refine(&coarse, &coarse, &d, 1);
        assert_eq!(r, coarse);
    }

    #[test]
    fn splits_large_enough_outlier_group() {
        // Tight group of four plus a loose pair far away in the same coarse cluster.
        let d = cluster_of(&[0.0, 0.01, 0.02, 0.03, 1.0, 1.01]);
        let coarse = ClusterAssignment::from_groups(&[Some(0); 6], 1);
        let fine = ClusterAssignment::from_groups(&[Some(0), Some(0), Some(0), Some(0), Some(1), Some(1)], 1);
        let r = refine(&coarse, &fine, &d, 2);
        assert_eq!(r.num_clusters(), 2);
        assert_eq!(r.labels()[4], r.labels()[5]);
        assert_ne!(r.labels()[0], r.labels()[4]);
    }
}

#[cfg(test)]
mod props {
    use proptest::prelude::*;

    use super::*;
    use crate::clustering::dbscan;

    fn points() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-5.0..5.0f64, 3..40)
    }

    proptest! {
        #[test]
        fn score_is_scale_invariant(pts in points(), c in 0.01..100.0f64, k in 1usize..3) {
            let d = DistanceMatrix::from_points_1d(&pts);
            let cluster: Vec<usize> = (0..pts.len()).collect();
            let sub: Vec<usize> = cluster.iter().copied().filter(|i| i % (k + 1) == 0).collect();
            let a = sub_cluster_score(&sub, &cluster, &d);
            let b = sub_cluster_score(&sub, &cluster, &d.scaled(c));
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{} vs {}", a, b);
        }

        #[test]
        fn refine_only_splits_and_demotes(pts in points(), eps in 0.2..2.0f64, shrink in 0.2..1.0f64, min_size in 1usize..4) {
            let d = DistanceMatrix::from_points_1d(&pts);
            let coarse = dbscan(&d, eps, 2);
            let fine = dbscan(&d, eps * shrink, 2);
            let r = refine(&coarse, &fine, &d, min_size);
            for members in r.members() {
                prop_assert!(members.len() >= min_size);
                let parent = coarse.labels()[members[0]];
                prop_assert!(parent.is_some());
                prop_assert!(members.iter().all(|&i| coarse.labels()[i] == parent));
            }
        }

        #[test]
        fn infinite_threshold_and_unit_size_is_identity(pts in points(), eps in 0.2..2.0f64, shrink in 0.2..1.0f64) {
            let d = DistanceMatrix::from_points_1d(&pts);
            let coarse = dbscan(&d, eps, 2);
            let fine = dbscan(&d, eps * shrink, 2);
            let r = refine_with_threshold(&coarse, &fine, &d, 1, f64::INFINITY);
            prop_assert_eq!(r.labels(), coarse.labels());
        }
    }
}
