//! Density clustering of first-branch features and the sub-cluster noise-score
//! refinement that turns coarse clusters into pseudo labels.

mod dbscan;
mod refine;

pub use dbscan::dbscan;
pub use refine::{refine, refine_with_threshold, sub_cluster_score};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Symmetric `n x n` matrix of cosine distances.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl DistanceMatrix {
    /// Wraps a precomputed matrix. It must be square, symmetric, non-negative
    /// and zero on the diagonal.
    pub fn from_entries(n: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::BadLength {
                shape: vec![n, n],
                expected: n * n,
                actual: entries.len(),
            });
        }
        for i in 0..n {
            if entries[i * n + i] != 0.0 {
                return Err(Error::InvalidArgument(format!("distance diagonal {i} is not zero")));
            }
            for j in 0..i {
                let (a, b) = (entries[i * n + j], entries[j * n + i]);
                if a != b || a < 0.0 || a.is_nan() {
                    return Err(Error::InvalidArgument(format!(
                        "distance ({i}, {j}) is not symmetric and non-negative"
                    )));
                }
            }
        }
        Ok(DistanceMatrix { n, entries })
    }

    /// `|p_i - p_j|` for scalar points; handy for tests and examples.
    pub fn from_points_1d(points: &[f64]) -> Self {
        let n = points.len();
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                entries[i * n + j] = (points[i] - points[j]).abs();
            }
        }
        DistanceMatrix { n, entries }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    /// Every entry multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        DistanceMatrix {
            n: self.n,
            entries: self.entries.iter().map(|d| d * c).collect(),
        }
    }
}

/// Cosine distance `1 - cos(a, b)` between all feature rows.
pub fn pairwise_distance(features: &Tensor) -> Result<DistanceMatrix> {
    let n = features.rows();
    let norms: Vec<f64> = (0..n)
        .map(|i| features.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    if let Some(index) = norms.iter().position(|&v| v == 0.0) {
        return Err(Error::ZeroNorm {
            what: "pairwise_distance",
            index,
        });
    }
    let mut entries = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..i {
            let dot: f64 = features.row(i).iter().zip(features.row(j)).map(|(a, b)| a * b).sum();
            let d = (1.0 - dot / (norms[i] * norms[j])).clamp(0.0, 2.0);
            entries[i * n + j] = d;
            entries[j * n + i] = d;
        }
    }
    Ok(DistanceMatrix { n, entries })
}

/// Cluster label of one index.
pub type Label = Option<usize>;

/// Partition of `0..n` into clusters `0..m` plus unlabeled indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    labels: Vec<Label>,
    num_clusters: usize,
    /// Size floor applied when the assignment was produced (1 for raw DBSCAN output).
    pub min_cluster_size: usize,
}

impl ClusterAssignment {
    /// Builds an assignment from arbitrary group ids, renumbering clusters by
    /// their smallest member so the result is canonical. Groups smaller than
    /// `min_cluster_size` become unlabeled.
    pub fn from_groups(groups: &[Label], min_cluster_size: usize) -> Self {
        let mut sizes = std::collections::HashMap::new();
        for g in groups.iter().flatten() {
            *sizes.entry(*g).or_insert(0usize) += 1;
        }
        let mut remap = std::collections::HashMap::new();
        let mut labels = Vec::with_capacity(groups.len());
        for g in groups {
            let l = match g {
                Some(g) if sizes[g] >= min_cluster_size.max(1) => {
                    let next = remap.len();
                    Some(*remap.entry(*g).or_insert(next))
                }
                _ => None,
            };
            labels.push(l);
        }
        ClusterAssignment {
            num_clusters: remap.len(),
            labels,
            min_cluster_size: min_cluster_size.max(1),
        }
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_clusters(&self) -> usize {
        self.num_clusters
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_clusters];
        for (i, l) in self.labels.iter().enumerate() {
            if let Some(l) = l {
                out[*l].push(i);
            }
        }
        out
    }

    pub fn unlabeled(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i].is_none()).collect()
    }

    pub fn labeled_fraction(&self) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        self.labels.iter().filter(|l| l.is_some()).count() as f64 / self.labels.len() as f64
    }

    /// Labels as integers with `-1` for unlabeled.
    pub fn to_signed(&self) -> Vec<i64> {
        self.labels.iter().map(|l| l.map_or(-1, |v| v as i64)).collect()
    }
}

/// The pseudo-label function: dataset index to cluster id, for labeled indices only.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabels {
    labels: Vec<Label>,
    num_clusters: usize,
    pub epoch: usize,
}

impl PseudoLabels {
    pub fn get(&self, i: usize) -> Label {
        self.labels.get(i).copied().flatten()
    }

    pub fn as_slice(&self) -> &[Label] {
        &self.labels
    }

    pub fn num_clusters(&self) -> usize {
        self.num_clusters
    }

    /// Number of labeled indices.
    pub fn len(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.labels.iter().enumerate().filter_map(|(i, l)| l.map(|l| (i, l)))
    }

    /// Labels built directly from ground truth or a test fixture.
    pub fn from_labels(labels: Vec<Label>, epoch: usize) -> Self {
        let num_clusters = labels.iter().flatten().map(|l| l + 1).max().unwrap_or(0);
        PseudoLabels {
            labels,
            num_clusters,
            epoch,
        }
    }
}

pub fn assign_pseudo_labels(refined: &ClusterAssignment, epoch: usize) -> PseudoLabels {
    PseudoLabels {
        labels: refined.labels.clone(),
        num_clusters: refined.num_clusters,
        epoch,
    }
}
