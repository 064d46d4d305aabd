//! Retrieval metrics, cosine-margin statistics and the ablation harness.

mod ablation;
mod margin;
mod retrieval;

use serde::{Deserialize, Serialize};

pub use ablation::{ablation_harness, run_cell, AblationCell, AblationRow, AblationTable, CellRun, Grid};
pub use margin::{margin_report, Histogram, MarginReport};
pub use retrieval::{average_precision, evaluate_retrieval, ranked_relevance, Embedded, RetrievalResult};

use crate::encoders::EncoderParams;
use crate::error::Result;
use crate::synthdata::{EvalSplit, Sample};

/// Headline numbers for one evaluation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub name: String,
    pub map: f64,
    pub rank1: f64,
    pub same_id_distance: f64,
    pub diff_id_distance: f64,
}

pub fn embed_samples(encoder: &EncoderParams, samples: &[Sample]) -> Result<Vec<Embedded>> {
    samples
        .iter()
        .map(|s| {
            Ok(Embedded {
                embedding: encoder.forward(s.image.data())?.embedding,
                identity: s.identity,
                camera: s.camera,
            })
        })
        .collect()
}

/// Retrieval on the split plus margins over query and gallery together.
pub fn evaluate_encoder(
    encoder: &EncoderParams,
    split: &EvalSplit,
    bins: usize,
) -> Result<(EvalMetrics, MarginReport)> {
    let query = embed_samples(encoder, &split.query)?;
    let gallery = embed_samples(encoder, &split.gallery)?;
    let retrieval = evaluate_retrieval(&query, &gallery)?;
    let all: Vec<&Embedded> = query.iter().chain(&gallery).collect();
    let emb: Vec<Vec<f64>> = all.iter().map(|e| e.embedding.clone()).collect();
    let ids: Vec<usize> = all.iter().map(|e| e.identity).collect();
    let cams: Vec<usize> = all.iter().map(|e| e.camera).collect();
    let margins = margin_report(&emb, &ids, &cams, bins)?;
    Ok((
        EvalMetrics {
            name: split.name.clone(),
            map: retrieval.map,
            rank1: retrieval.rank1,
            same_id_distance: margins.same_id_mean,
            diff_id_distance: margins.diff_id_mean,
        },
        margins,
    ))
}
