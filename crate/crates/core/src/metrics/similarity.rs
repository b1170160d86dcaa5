use futures::stream::{self, StreamExt, TryStreamExt};
use serde::{Deserialize, Serialize};

use super::MetricError;
use crate::backends::{Backends, EmbeddingVector};

/// `dot(a, b) / (|a| |b|)`, 0 when either vector is all zeros.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, MetricError> {
    if a.dimension() != b.dimension() {
        return Err(MetricError::DimensionMismatch {
            left: a.dimension(),
            right: b.dimension(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    let dot: f64 = a
        .components()
        .iter()
        .zip(b.components())
        .map(|(x, y)| x * y)
        .sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `0.0, 0.1, ..., 1.0`.
pub fn default_bin_edges() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityHistogram {
    pub edges: Vec<f64>,
    /// `counts[i]` covers `[edges[i], edges[i + 1])`; the last bin is closed.
    pub counts: Vec<usize>,
    pub scores: Vec<f64>,
    pub mean: f64,
}

fn check_edges(edges: &[f64]) -> Result<(), MetricError> {
    if edges.len() < 2 {
        return Err(MetricError::InvalidConfig("need at least two bin edges".into()));
    }
    if edges.windows(2).any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less)) {
        return Err(MetricError::InvalidConfig(
            "bin edges must be strictly increasing".into(),
        ));
    }
    if edges[0] > 0.0 || edges[edges.len() - 1] < 1.0 {
        return Err(MetricError::InvalidConfig("bin edges must cover [0, 1]".into()));
    }
    Ok(())
}

/// Bin index of `score`; scores on an interior edge go to the upper bin and
/// scores outside the edges are clamped into the first or last bin.
pub fn bin_index(edges: &[f64], score: f64) -> usize {
    let bins = edges.len() - 1;
    edges
        .partition_point(|edge| *edge <= score)
        .saturating_sub(1)
        .min(bins - 1)
}

pub fn histogram_from_scores(
    scores: Vec<f64>,
    edges: &[f64],
) -> Result<SimilarityHistogram, MetricError> {
    check_edges(edges)?;
    if scores.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let mut counts = vec![0; edges.len() - 1];
    for score in &scores {
        counts[bin_index(edges, *score)] += 1;
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok(SimilarityHistogram {
        edges: edges.to_vec(),
        counts,
        scores,
        mean,
    })
}

/// Embedding cosine for each `(left, right)` pair, binned.
pub async fn similarity_histogram(
    pairs: &[(String, String)],
    backends: &Backends,
    edges: &[f64],
) -> Result<SimilarityHistogram, MetricError> {
    check_edges(edges)?;
    if pairs.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let scores: Vec<f64> = stream::iter(pairs)
        .map(|(left, right)| async move {
            let (a, b) = futures::try_join!(backends.embed(left), backends.embed(right))?;
            cosine_similarity(&a, &b)
        })
        .buffered(32)
        .try_collect()
        .await?;
    histogram_from_scores(scores, edges)
}
