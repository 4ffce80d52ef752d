//! Retrieval metrics: gallery ranking, mAP and CMC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorcore::Tensor;

const UNIT_TOL: f64 = 1e-6;

fn check_unit_rows(t: &Tensor, what: &str) -> Result<()> {
    if t.ndim() != 2 {
        return Err(Error::shape(format!("{what} must be [N, D], got {:?}", t.dims())));
    }
    for i in 0..t.rows() {
        let n = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::contract(format!("{what} row {i} has norm {n}")));
        }
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gallery indices by descending similarity to `query`, ties by ascending index.
pub fn rank_gallery(query: &[f64], gallery: &Tensor) -> Result<Vec<usize>> {
    if gallery.ndim() != 2 || gallery.rows() == 0 {
        return Err(Error::contract(format!("empty or malformed gallery {:?}", gallery.dims())));
    }
    if gallery.dims()[1] != query.len() {
        return Err(Error::shape(format!(
            "query dim {} vs gallery dim {}",
            query.len(),
            gallery.dims()[1]
        )));
    }
    let sims: Vec<f64> = (0..gallery.rows()).map(|j| dot(query, gallery.row(j))).collect();
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    Ok(order)
}

/// Average precision of a relevance-flagged ranking; `None` without relevant items.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let total = relevant.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub n_query: usize,
    pub n_gallery: usize,
    /// Queries with at least one relevant gallery item.
    pub n_valid: usize,
}

/// mAP and CMC@1/5/10 over the queries that have a match in the gallery.
pub fn evaluate<T: PartialEq>(query: &Tensor, query_ids: &[T], gallery: &Tensor, gallery_ids: &[T]) -> Result<Metrics> {
    if query.ndim() != 2 || query.rows() == 0 {
        return Err(Error::contract("empty query set"));
    }
    if query.rows() != query_ids.len() || gallery.rows() != gallery_ids.len() {
        return Err(Error::contract(format!(
            "{} queries with {} ids, {} gallery items with {} ids",
            query.rows(),
            query_ids.len(),
            gallery.rows(),
            gallery_ids.len()
        )));
    }
    check_unit_rows(query, "query")?;
    check_unit_rows(gallery, "gallery")?;
    let mut ap_sum = 0.0;
    let mut cmc = [0usize; 3];
    let mut valid = 0usize;
    for (i, qid) in query_ids.iter().enumerate() {
        let order = rank_gallery(query.row(i), gallery)?;
        let rel: Vec<bool> = order.iter().map(|&j| gallery_ids[j] == *qid).collect();
        let Some(ap) = average_precision(&rel) else {
            log::warn!("query {i} has no relevant gallery item; excluded");
            continue;
        };
        valid += 1;
        ap_sum += ap;
        let first = rel.iter().position(|&r| r).expect("a relevant item exists");
        for (slot, r) in cmc.iter_mut().zip([1, 5, 10]) {
            if first < r {
                *slot += 1;
            }
        }
    }
    if valid == 0 {
        return Err(Error::contract("no query has a relevant gallery item"));
    }
    let v = valid as f64;
    Ok(Metrics {
        map: ap_sum / v,
        rank1: cmc[0] as f64 / v,
        rank5: cmc[1] as f64 / v,
        rank10: cmc[2] as f64 / v,
        n_query: query.rows(),
        n_gallery: gallery.rows(),
        n_valid: valid,
    })
}
