use serde::{Deserialize, Serialize};

use super::MetricError;
use crate::tokenize::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeLConfig {
    pub beta: f64,
}

impl Default for RougeLConfig {
    fn default() -> Self {
        Self { beta: 1.2 }
    }
}

/// Length of the longest common subsequence, two-row DP.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            curr[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(curr[j])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// LCS F-measure, weighted towards recall by `beta`.
pub fn rouge_l(
    candidate: &TokenSequence,
    reference: &TokenSequence,
    config: &RougeLConfig,
) -> Result<f64, MetricError> {
    if !(config.beta.is_finite() && config.beta > 0.0) {
        return Err(MetricError::InvalidConfig(format!(
            "Rouge-L beta must be positive, got {}",
            config.beta
        )));
    }
    if candidate.is_empty() || reference.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let lcs = lcs_len(candidate.tokens(), reference.tokens());
    if lcs == 0 {
        return Ok(0.0);
    }
    let precision = lcs as f64 / candidate.len() as f64;
    let recall = lcs as f64 / reference.len() as f64;
    let beta2 = config.beta * config.beta;
    Ok((1.0 + beta2) * recall * precision / (recall + beta2 * precision))
}
