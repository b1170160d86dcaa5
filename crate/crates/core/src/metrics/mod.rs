//! Automatic response metrics: BLEU-N, unigram F1, Rouge-n, Rouge-L,
//! Bert-Score, plus embedding-similarity histograms.
//!
//! Everything operates on [`TokenSequence`]s and reports values in `[0, 1]`.
//! Multiply by 100 for presentation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Backends};
use crate::tokenize::{tokenize, TokenScheme, TokenSequence};

mod bertscore;
mod lcs;
mod ngram;
mod similarity;

pub use bertscore::{
    bertscore, bertscore_f1, bertscore_from_embeddings, bertscore_from_matrix, BertScore, IdfTable,
};
pub use lcs::{lcs_len, rouge_l, RougeLConfig};
pub use ngram::{
    bleu_breakdown, bleu_n, brevity_penalty, ngram_precision, rouge_n, unigram_f1, BleuBreakdown,
    BleuConfig, BrevityPenaltyMode, NGramProfile,
};
pub use similarity::{
    bin_index, cosine_similarity, default_bin_edges, histogram_from_scores, similarity_histogram,
    SimilarityHistogram,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("reference has no {n}-grams")]
    ReferenceTooShort { n: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("embedding dimensions differ: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("invalid metric configuration: {0}")]
    InvalidConfig(String),
    #[error("idf table line {line}: {reason}")]
    InvalidIdf { line: usize, reason: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Default)]
pub struct MetricConfig {
    pub scheme: TokenScheme,
    pub bleu: BleuConfig,
    pub rouge_l: RougeLConfig,
    pub idf: IdfTable,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu4: f64,
    pub f1: f64,
    pub rouge_l: f64,
    pub rouge_1: f64,
    pub rouge_2: f64,
    pub bert_score: f64,
}

impl MetricReport {
    pub fn values(&self) -> [f64; 6] {
        [
            self.bleu4,
            self.f1,
            self.rouge_l,
            self.rouge_1,
            self.rouge_2,
            self.bert_score,
        ]
    }

    pub fn scaled(&self, factor: f64) -> MetricReport {
        MetricReport {
            bleu4: self.bleu4 * factor,
            f1: self.f1 * factor,
            rouge_l: self.rouge_l * factor,
            rouge_1: self.rouge_1 * factor,
            rouge_2: self.rouge_2 * factor,
            bert_score: self.bert_score * factor,
        }
    }
}

/// Lexical metrics only; `bert_score` is left at 0.
///
/// Pairs a metric cannot score (a reference without bigrams, an empty
/// candidate) count as 0 for that metric rather than failing the report.
pub fn lexical_report(
    candidate: &TokenSequence,
    reference: &TokenSequence,
    config: &MetricConfig,
) -> Result<MetricReport, MetricError> {
    let zero_if_unscorable = |r: Result<f64, MetricError>| match r {
        Ok(v) => Ok(v),
        Err(MetricError::ReferenceTooShort { .. } | MetricError::EmptyInput) => Ok(0.0),
        Err(other) => Err(other),
    };
    Ok(MetricReport {
        bleu4: bleu_n(candidate, reference, &config.bleu)?,
        f1: unigram_f1(candidate, reference),
        rouge_l: zero_if_unscorable(rouge_l(candidate, reference, &config.rouge_l))?,
        rouge_1: zero_if_unscorable(rouge_n(candidate, reference, 1))?,
        rouge_2: zero_if_unscorable(rouge_n(candidate, reference, 2))?,
        bert_score: 0.0,
    })
}

/// Full report for one candidate/reference text pair.
pub async fn evaluate_pair(
    candidate: &str,
    reference: &str,
    config: &MetricConfig,
    backends: &Backends,
) -> Result<MetricReport, MetricError> {
    let cand = tokenize(candidate, config.scheme);
    let refs = tokenize(reference, config.scheme);
    let mut report = lexical_report(&cand, &refs, config)?;
    report.bert_score = match bertscore_f1(&cand, &refs, backends, &config.idf).await {
        Ok(v) => v,
        Err(MetricError::EmptyInput) => 0.0,
        Err(other) => return Err(other),
    };
    Ok(report)
}

/// Arithmetic mean of each metric.
pub fn corpus_mean(reports: &[MetricReport]) -> Result<MetricReport, MetricError> {
    if reports.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(MetricReport {
        bleu4: mean(|r| r.bleu4),
        f1: mean(|r| r.f1),
        rouge_l: mean(|r| r.rouge_l),
        rouge_1: mean(|r| r.rouge_1),
        rouge_2: mean(|r| r.rouge_2),
        bert_score: mean(|r| r.bert_score),
    })
}
