use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, l2_norm};

/// An embedding with its retrieval labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedded {
    pub embedding: Vec<f64>,
    pub identity: usize,
    pub camera: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// `None` for queries with no valid match in the gallery.
    pub average_precision: Vec<Option<f64>>,
    /// `cmc[k]` is the fraction of evaluated queries matched within the top `k + 1`.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub rank1: f64,
}

pub(crate) fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = l2_norm(v);
    if n == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Average precision of one ranked relevance list.
pub fn average_precision(relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &r) in relevance.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Ranks the gallery for one query: same-identity same-camera entries are
/// dropped, the rest ordered by descending cosine similarity with ties kept
/// in gallery order. Returns the relevance of each ranked entry.
pub fn ranked_relevance(query: &Embedded, gallery: &[Embedded]) -> Result<Vec<bool>> {
    let q = unit(&query.embedding)?;
    let mut scored = Vec::with_capacity(gallery.len());
    for g in gallery {
        if g.identity == query.identity && g.camera == query.camera {
            continue;
        }
        if g.embedding.len() != q.len() {
            return Err(Error::ShapeMismatch { expected: vec![q.len()], actual: vec![g.embedding.len()] });
        }
        scored.push((dot(&q, &unit(&g.embedding)?), g.identity == query.identity));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(scored.into_iter().map(|(_, r)| r).collect())
}

/// Single-query mAP and CMC over cosine ranking.
pub fn evaluate_retrieval(query: &[Embedded], gallery: &[Embedded]) -> Result<RetrievalResult> {
    let mut aps = Vec::with_capacity(query.len());
    let mut first_hits = Vec::new();
    let mut depth = 0;
    for (qi, q) in query.iter().enumerate() {
        let rel = ranked_relevance(q, gallery)?;
        depth = depth.max(rel.len());
        let ap = average_precision(&rel);
        match ap {
            Some(_) => first_hits.push(rel.iter().position(|&r| r).unwrap()),
            None => warn!("query {qi} (identity {}) has no valid gallery match, excluded", q.identity),
        }
        aps.push(ap);
    }
    if first_hits.is_empty() {
        return Err(Error::NothingToEvaluate("query"));
    }
    let n = first_hits.len() as f64;
    let mut cmc = vec![0.0; depth];
    for &h in &first_hits {
        for c in &mut cmc[h..] {
            *c += 1.0;
        }
    }
    cmc.iter_mut().for_each(|c| *c /= n);
    let map = aps.iter().flatten().sum::<f64>() / n;
    Ok(RetrievalResult { average_precision: aps, rank1: cmc[0], cmc, map })
}
