use std::collections::VecDeque;

use super::{ClusterAssignment, DistanceMatrix};

/// DBSCAN over a precomputed distance matrix.
///
/// A point is core when at least `min_pts` points (itself included) lie within
/// `eps`, inclusive. Clusters grow from core points in index order; a border
/// point joins the first cluster that reaches it. Noise is unlabeled.
pub fn dbscan(dist: &DistanceMatrix, eps: f64, min_pts: usize) -> ClusterAssignment {
    let n = dist.len();
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| dist.get(i, j) <= eps).collect())
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts.max(1)).collect();

    let mut groups: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for seed in 0..n {
        if !core[seed] || groups[seed].is_some() {
            continue;
        }
        let id = next;
        next += 1;
        groups[seed] = Some(id);
        queue.push_back(seed);
        while let Some(p) = queue.pop_front() {
            for &q in &neighbors[p] {
                if groups[q].is_some() {
                    continue;
                }
                groups[q] = Some(id);
                if core[q] {
                    queue.push_back(q);
                }
            }
        }
    }
    ClusterAssignment::from_groups(&groups, 1)
}
