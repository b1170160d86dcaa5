use std::collections::{BTreeSet, HashMap};

use futures::stream::{self, StreamExt, TryStreamExt};
use serde::{Deserialize, Serialize};

use super::{cosine_similarity, MetricError};
use crate::backends::{Backends, EmbeddingVector};
use crate::tokenize::TokenSequence;

/// Per-token idf weights. An empty table weights every token 1.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdfTable {
    weights: HashMap<String, f64>,
    unseen: f64,
}

impl IdfTable {
    pub fn uniform() -> Self {
        Self::default()
    }

    pub fn new(weights: HashMap<String, f64>, unseen: f64) -> Result<Self, MetricError> {
        let bad = |w: f64| !(w.is_finite() && w >= 0.0);
        if bad(unseen) || weights.values().any(|w| bad(*w)) {
            return Err(MetricError::InvalidConfig(
                "idf weights must be finite and >= 0".into(),
            ));
        }
        Ok(Self { weights, unseen })
    }

    /// Parses `token<TAB>weight` lines. Blank lines are skipped; unseen
    /// tokens get the largest weight in the file.
    pub fn parse(text: &str) -> Result<Self, MetricError> {
        let mut weights = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let invalid = |reason: &str| MetricError::InvalidIdf {
                line: i + 1,
                reason: reason.to_owned(),
            };
            let (token, weight) = line
                .split_once('\t')
                .ok_or_else(|| invalid("expected token<TAB>weight"))?;
            let weight: f64 = weight
                .trim()
                .parse()
                .map_err(|_| invalid("weight is not a number"))?;
            if !(weight.is_finite() && weight >= 0.0) {
                return Err(invalid("weight must be finite and >= 0"));
            }
            weights.insert(token.to_owned(), weight);
        }
        let unseen = weights.values().copied().fold(0.0, f64::max);
        Ok(Self { weights, unseen })
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weight(&self, token: &str) -> f64 {
        if self.weights.is_empty() {
            1.0
        } else {
            self.weights.get(token).copied().unwrap_or(self.unseen)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BertScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn weighted_mean(values: impl Iterator<Item = (f64, f64)>) -> f64 {
    let (num, den) = values.fold((0.0, 0.0), |(n, d), (v, w)| (n + v * w, d + w));
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Greedy matching over a similarity matrix with rows = reference tokens and
/// columns = candidate tokens.
pub fn bertscore_from_matrix(
    similarity: &[Vec<f64>],
    reference_weights: &[f64],
    candidate_weights: &[f64],
) -> Result<BertScore, MetricError> {
    if similarity.is_empty() || candidate_weights.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    if similarity.len() != reference_weights.len()
        || similarity.iter().any(|row| row.len() != candidate_weights.len())
    {
        return Err(MetricError::InvalidConfig(
            "similarity matrix shape does not match the weights".into(),
        ));
    }
    let row_max = similarity
        .iter()
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let recall = weighted_mean(row_max.zip(reference_weights.iter().copied()));
    let col_max = (0..candidate_weights.len()).map(|j| {
        similarity
            .iter()
            .map(|row| row[j])
            .fold(f64::NEG_INFINITY, f64::max)
    });
    let precision = weighted_mean(col_max.zip(candidate_weights.iter().copied()));
    let f1 = if precision + recall <= 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(BertScore {
        precision,
        recall,
        f1,
    })
}

pub fn bertscore_from_embeddings(
    candidate: &TokenSequence,
    candidate_vectors: &[EmbeddingVector],
    reference: &TokenSequence,
    reference_vectors: &[EmbeddingVector],
    idf: &IdfTable,
) -> Result<BertScore, MetricError> {
    let similarity = reference_vectors
        .iter()
        .map(|r| {
            candidate_vectors
                .iter()
                .map(|c| cosine_similarity(r, c))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let weights = |seq: &TokenSequence| seq.iter().map(|t| idf.weight(t)).collect::<Vec<_>>();
    bertscore_from_matrix(&similarity, &weights(reference), &weights(candidate))
}

/// Embeds every distinct token once, then scores.
pub async fn bertscore(
    candidate: &TokenSequence,
    reference: &TokenSequence,
    backends: &Backends,
    idf: &IdfTable,
) -> Result<BertScore, MetricError> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let distinct: BTreeSet<&str> = candidate
        .iter()
        .chain(reference.iter())
        .map(String::as_str)
        .collect();
    let vectors: HashMap<&str, EmbeddingVector> = stream::iter(distinct)
        .map(|token| async move { backends.embed(token).await.map(|v| (token, v)) })
        .buffer_unordered(16)
        .try_collect()
        .await?;
    let lookup = |seq: &TokenSequence| -> Vec<EmbeddingVector> {
        seq.iter().map(|t| vectors[t.as_str()].clone()).collect()
    };
    bertscore_from_embeddings(
        candidate,
        &lookup(candidate),
        reference,
        &lookup(reference),
        idf,
    )
}

pub async fn bertscore_f1(
    candidate: &TokenSequence,
    reference: &TokenSequence,
    backends: &Backends,
    idf: &IdfTable,
) -> Result<f64, MetricError> {
    bertscore(candidate, reference, backends, idf).await.map(|s| s.f1)
}
