use serde::{Deserialize, Serialize};

use super::retrieval::unit;
use crate::error::{Error, Result};
use crate::numerics::dot;

/// Fixed-width histogram over `[0, 2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    fn new(bins: usize) -> Self {
        let bins = bins.max(1);
        Self { edges: (0..=bins).map(|i| 2.0 * i as f64 / bins as f64).collect(), counts: vec![0; bins] }
    }

    fn add(&mut self, d: f64) {
        let bins = self.counts.len();
        let i = ((d / 2.0 * bins as f64) as usize).min(bins - 1);
        self.counts[i] += 1;
    }
}

/// Cosine-distance statistics of an embedded population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    /// Mean over same-identity pairs from different cameras.
    pub same_id_mean: f64,
    /// Mean over all different-identity pairs.
    pub diff_id_mean: f64,
    pub same_id_hist: Histogram,
    pub diff_id_hist: Histogram,
}

impl MarginReport {
    /// Long-format CSV: `kind,lower,upper,count`.
    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("kind,lower,upper,count\n");
        for (kind, h) in [("same_id", &self.same_id_hist), ("diff_id", &self.diff_id_hist)] {
            for (i, c) in h.counts.iter().enumerate() {
                s.push_str(&format!("{kind},{},{},{c}\n", h.edges[i], h.edges[i + 1]));
            }
        }
        s
    }
}

/// Pairwise cosine distances `1 - s` split into same-identity cross-camera
/// and different-identity pairs.
pub fn margin_report(
    embeddings: &[Vec<f64>],
    identities: &[usize],
    cameras: &[usize],
    bins: usize,
) -> Result<MarginReport> {
    if embeddings.len() != identities.len() || embeddings.len() != cameras.len() {
        return Err(Error::InvalidArgument("embedding and label counts differ".into()));
    }
    let units = embeddings.iter().map(|v| unit(v)).collect::<Result<Vec<_>>>()?;
    let mut same = (0.0, 0usize, Histogram::new(bins));
    let mut diff = (0.0, 0usize, Histogram::new(bins));
    for i in 0..units.len() {
        for j in i + 1..units.len() {
            let acc = if identities[i] != identities[j] {
                &mut diff
            } else if cameras[i] != cameras[j] {
                &mut same
            } else {
                continue;
            };
            let d = (1.0 - dot(&units[i], &units[j])).clamp(0.0, 2.0);
            acc.0 += d;
            acc.1 += 1;
            acc.2.add(d);
        }
    }
    if same.1 == 0 {
        return Err(Error::NothingToEvaluate("same-identity cross-camera pair"));
    }
    if diff.1 == 0 {
        return Err(Error::NothingToEvaluate("different-identity pair"));
    }
    Ok(MarginReport {
        same_id_mean: same.0 / same.1 as f64,
        diff_id_mean: diff.0 / diff.1 as f64,
        same_id_hist: same.2,
        diff_id_hist: diff.2,
    })
}
