//! Retrieval metrics for re-identification: mAP and CMC@1/5/10 with cosine
//! ranking and same-identity same-camera gallery entries removed.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Query,
    Gallery,
}

/// Feature rows with their identity and camera ids.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalSet {
    pub features: Tensor,
    pub ids: Vec<usize>,
    pub cams: Vec<usize>,
    pub role: Role,
}

impl RetrievalSet {
    pub fn new(features: Tensor, ids: Vec<usize>, cams: Vec<usize>, role: Role) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != ids.len() || ids.len() != cams.len() {
            return Err(Error::InvalidArgument(format!(
                "retrieval set has {:?} features, {} ids, {} cams",
                features.shape(),
                ids.len(),
                cams.len()
            )));
        }
        Ok(RetrievalSet {
            features,
            ids,
            cams,
            role,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub map: f64,
    pub cmc1: f64,
    pub cmc5: f64,
    pub cmc10: f64,
    pub per_query_ap: Vec<f64>,
}

fn cosine_similarities(query: &[f64], gallery: &Tensor) -> Result<Vec<f64>> {
    let qn = query.iter().map(|v| v * v).sum::<f64>().sqrt();
    if qn == 0.0 {
        return Err(Error::ZeroNorm {
            what: "query",
            index: 0,
        });
    }
    (0..gallery.rows())
        .map(|j| {
            let g = gallery.row(j);
            let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if gn == 0.0 {
                return Err(Error::ZeroNorm {
                    what: "gallery",
                    index: j,
                });
            }
            Ok(query.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / (qn * gn))
        })
        .collect()
}

/// Gallery indices sorted by descending cosine similarity to `query`, ties
/// broken by index. Entries with the query's identity and camera are dropped.
pub fn rank_gallery(query: &[f64], id: usize, cam: usize, gallery: &RetrievalSet) -> Result<Vec<usize>> {
    if query.len() != gallery.features.cols() {
        return Err(Error::ShapeMismatch {
            op: "rank_gallery",
            lhs: vec![1, query.len()],
            rhs: gallery.features.shape().to_vec(),
        });
    }
    let sims = cosine_similarities(query, &gallery.features)?;
    let mut order: Vec<usize> = (0..gallery.len())
        .filter(|&j| !(gallery.ids[j] == id && gallery.cams[j] == cam))
        .collect();
    if order.is_empty() {
        return Err(Error::EmptyGallery(id));
    }
    order.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    Ok(order)
}

/// `(1/R) Σ precision@k` over the relevant positions `k`.
pub fn average_precision(relevant: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::NoRelevant);
    }
    Ok(sum / hits as f64)
}

pub fn evaluate(query: &RetrievalSet, gallery: &RetrievalSet) -> Result<EvalResult> {
    if query.is_empty() {
        return Err(Error::InvalidArgument("empty query set".into()));
    }
    let mut per_query_ap = Vec::with_capacity(query.len());
    let mut first_hit = Vec::with_capacity(query.len());
    for i in 0..query.len() {
        let order = rank_gallery(query.features.row(i), query.ids[i], query.cams[i], gallery)?;
        let rel: Vec<bool> = order.iter().map(|&j| gallery.ids[j] == query.ids[i]).collect();
        per_query_ap.push(average_precision(&rel)?);
        first_hit.push(rel.iter().position(|&r| r).unwrap());
    }
    let n = query.len() as f64;
    let cmc = |k: usize| first_hit.iter().filter(|&&r| r < k).count() as f64 / n;
    Ok(EvalResult {
        map: per_query_ap.iter().sum::<f64>() / n,
        cmc1: cmc(1),
        cmc5: cmc(5),
        cmc10: cmc(10),
        per_query_ap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: &[&[f64]], ids: &[usize], cams: &[usize], role: Role) -> RetrievalSet {
        RetrievalSet::new(Tensor::from_rows(rows).unwrap(), ids.to_vec(), cams.to_vec(), role).unwrap()
    }

    #[test]
    fn ap_cases() {
        assert_eq!(average_precision(&[true, false, false]).unwrap(), 1.0);
        assert!((average_precision(&[true, false, true]).unwrap() - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&[true; 4]).unwrap(), 1.0);
        assert!(matches!(average_precision(&[false, false]), Err(Error::NoRelevant)));
    }

    #[test]
    fn self_match_under_other_camera_ranks_first() {
        let g = set(&[&[0.0, 1.0], &[1.0, 0.2]], &[1, 0], &[0, 1], Role::Gallery);
        let order = rank_gallery(&[1.0, 0.2], 0, 0, &g).unwrap();
        assert_eq!(order[0], 1);
    }

    #[test]
    fn same_id_same_camera_is_excluded() {
        let g = set(
            &[&[1.0, 0.0], &[0.9, 0.1], &[0.0, 1.0]],
            &[0, 0, 1],
            &[0, 1, 0],
            Role::Gallery,
        );
        let order = rank_gallery(&[1.0, 0.0], 0, 0, &g).unwrap();
        assert_eq!(order, vec![1, 2]);
        let only = set(&[&[1.0, 0.0]], &[0], &[0], Role::Gallery);
        assert!(matches!(
            rank_gallery(&[1.0, 0.0], 0, 0, &only),
            Err(Error::EmptyGallery(0))
        ));
    }

    #[test]
    fn ties_break_by_index() {
        let g = set(
            &[&[1.0, 0.0], &[2.0, 0.0], &[0.0, 1.0]],
            &[1, 2, 3],
            &[0, 0, 0],
            Role::Gallery,
        );
        assert_eq!(rank_gallery(&[1.0, 0.0], 0, 1, &g).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn rank_two_first_match() {
        let q = set(&[&[1.0, 0.0]], &[0], &[0], Role::Query);
        let g = set(
            &[&[1.0, 0.1], &[1.0, 0.5], &[0.0, 1.0]],
            &[1, 0, 2],
            &[1, 1, 1],
            Role::Gallery,
        );
        let r = evaluate(&q, &g).unwrap();
        assert_eq!((r.cmc1, r.cmc5, r.cmc10), (0.0, 1.0, 1.0));
        assert_eq!(r.map, 0.5);
    }

    #[test]
    fn identical_spaces_give_perfect_map() {
        let rows: &[&[f64]] = &[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]];
        let q = set(rows, &[0, 1, 2], &[0, 0, 0], Role::Query);
        let g = set(rows, &[0, 1, 2], &[1, 1, 1], Role::Gallery);
        let r = evaluate(&q, &g).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.cmc1, 1.0);
    }

    #[test]
    fn query_without_match_is_an_error() {
        let q = set(&[&[1.0, 0.0]], &[5], &[0], Role::Query);
        let g = set(&[&[1.0, 0.0]], &[1], &[1], Role::Gallery);
        assert!(matches!(evaluate(&q, &g), Err(Error::NoRelevant)));
    }
}
