use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::MetricError;
use crate::tokenize::TokenSequence;

/// Multiset of the `n`-grams of one token sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NGramProfile<'a> {
    n: usize,
    counts: HashMap<&'a [String], usize>,
    total: usize,
}

impl<'a> NGramProfile<'a> {
    pub fn new(tokens: &'a TokenSequence, n: usize) -> Self {
        assert!(n >= 1, "n-gram order must be at least 1");
        let mut counts = HashMap::new();
        let mut total = 0;
        for gram in tokens.tokens().windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
            total += 1;
        }
        Self { n, counts, total }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of n-grams, with repetition.
    pub fn total(&self) -> usize {
        self.total
    }

    pub fn count(&self, gram: &[String]) -> usize {
        self.counts.get(gram).copied().unwrap_or(0)
    }

    /// Σ over n-grams of `min(count here, count in other)`.
    pub fn clipped_overlap(&self, other: &NGramProfile<'_>) -> usize {
        self.counts
            .iter()
            .map(|(gram, count)| (*count).min(other.count(gram)))
            .sum()
    }
}

/// Clipped n-gram precision `p_n`; 0 when the candidate has no n-grams.
pub fn ngram_precision(candidate: &TokenSequence, reference: &TokenSequence, n: usize) -> f64 {
    let cand = NGramProfile::new(candidate, n);
    if cand.total() == 0 {
        return 0.0;
    }
    let reference = NGramProfile::new(reference, n);
    cand.clipped_overlap(&reference) as f64 / cand.total() as f64
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BrevityPenaltyMode {
    /// `exp((1 - lr) / lc)`: the shortfall divided by the candidate length.
    LengthScaled,
    /// `exp(1 - lr / lc)`.
    #[default]
    Standard,
}

pub fn brevity_penalty(candidate_len: usize, reference_len: usize, mode: BrevityPenaltyMode) -> f64 {
    if candidate_len > reference_len {
        return 1.0;
    }
    if candidate_len == 0 {
        return 0.0;
    }
    let (lc, lr) = (candidate_len as f64, reference_len as f64);
    match mode {
        BrevityPenaltyMode::LengthScaled => ((1.0 - lr) / lc).exp(),
        BrevityPenaltyMode::Standard => (1.0 - lr / lc).exp(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuConfig {
    pub max_n: usize,
    pub weights: Vec<f64>,
    pub bp_mode: BrevityPenaltyMode,
}

impl Default for BleuConfig {
    fn default() -> Self {
        Self::uniform(4, BrevityPenaltyMode::Standard)
    }
}

impl BleuConfig {
    pub fn uniform(max_n: usize, bp_mode: BrevityPenaltyMode) -> Self {
        Self {
            max_n,
            weights: vec![1.0 / max_n as f64; max_n],
            bp_mode,
        }
    }

    pub fn validate(&self) -> Result<(), MetricError> {
        if self.max_n == 0 {
            return Err(MetricError::InvalidConfig("BLEU order must be >= 1".into()));
        }
        if self.weights.len() != self.max_n {
            return Err(MetricError::InvalidConfig(format!(
                "{} weights for BLEU-{}",
                self.weights.len(),
                self.max_n
            )));
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(MetricError::InvalidConfig("BLEU weights must be >= 0".into()));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(MetricError::InvalidConfig(format!(
                "BLEU weights sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuBreakdown {
    /// `p_1 ..= p_N`.
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub score: f64,
}

pub fn bleu_breakdown(
    candidate: &TokenSequence,
    reference: &TokenSequence,
    config: &BleuConfig,
) -> Result<BleuBreakdown, MetricError> {
    config.validate()?;
    let precisions: Vec<f64> = (1..=config.max_n)
        .map(|n| ngram_precision(candidate, reference, n))
        .collect();
    let bp = brevity_penalty(candidate.len(), reference.len(), config.bp_mode);
    // No smoothing: a single zero precision zeroes the score.
    let score = if precisions.contains(&0.0) {
        0.0
    } else {
        let log_mean: f64 = precisions
            .iter()
            .zip(&config.weights)
            .map(|(p, w)| w * p.ln())
            .sum();
        bp * log_mean.exp()
    };
    Ok(BleuBreakdown {
        precisions,
        brevity_penalty: bp,
        score,
    })
}

pub fn bleu_n(
    candidate: &TokenSequence,
    reference: &TokenSequence,
    config: &BleuConfig,
) -> Result<f64, MetricError> {
    bleu_breakdown(candidate, reference, config).map(|b| b.score)
}

/// Harmonic mean of clipped unigram precision and recall.
pub fn unigram_f1(candidate: &TokenSequence, reference: &TokenSequence) -> f64 {
    let cand = NGramProfile::new(candidate, 1);
    let refp = NGramProfile::new(reference, 1);
    if cand.total() == 0 || refp.total() == 0 {
        return 0.0;
    }
    let overlap = cand.clipped_overlap(&refp) as f64;
    let precision = overlap / cand.total() as f64;
    let recall = overlap / refp.total() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Recall-oriented clipped n-gram overlap.
pub fn rouge_n(
    candidate: &TokenSequence,
    reference: &TokenSequence,
    n: usize,
) -> Result<f64, MetricError> {
    let refp = NGramProfile::new(reference, n);
    if refp.total() == 0 {
        return Err(MetricError::ReferenceTooShort { n });
    }
    let cand = NGramProfile::new(candidate, n);
    Ok(cand.clipped_overlap(&refp) as f64 / refp.total() as f64)
}
