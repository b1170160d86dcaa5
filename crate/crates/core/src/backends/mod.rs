//! Generation, search and embedding backends.
//!
//! Each capability is a trait so the pipeline can run against remote HTTP
//! services ([`http`]) or the deterministic in-process mocks ([`mock`]).
//! Callers go through [`Backends`], which bounds every call by a timeout and
//! tags failures with the pipeline stage that issued them.

use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{KnowledgeSnippet, WebQuery};

pub mod http;
pub mod mock;

pub use http::HttpBackend;
pub use mock::{CorpusSearch, Fallback, HashedTrigramEmbedder, ScriptedGenerator, ScriptedReply};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(15);

/// Call sites that talk to a backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    KnowledgeClass,
    QueryGen,
    Search,
    Response,
    Embed,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::KnowledgeClass => "knowledge_class",
            Stage::QueryGen => "query_gen",
            Stage::Search => "search",
            Stage::Response => "response",
            Stage::Embed => "embed",
        };
        f.write_str(name)
    }
}

/// What went wrong inside a backend, before a stage is attached.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendFailure {
    #[error("timed out after {0:?}")]
    Timeout(Duration),
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("search returned no results")]
    EmptyResult,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{stage}: {failure}")]
pub struct BackendError {
    pub stage: Stage,
    pub failure: BackendFailure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_new_tokens: u32,
    pub want_token_logprobs: bool,
    pub want_knowledge_scores: bool,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>, max_new_tokens: u32) -> Self {
        Self {
            prompt: prompt.into(),
            max_new_tokens,
            want_token_logprobs: false,
            want_knowledge_scores: false,
        }
    }

    pub fn with_knowledge_scores(mut self) -> Self {
        self.want_knowledge_scores = true;
        self
    }

    pub fn with_token_logprobs(mut self) -> Self {
        self.want_token_logprobs = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge_scores: Option<Vec<f64>>,
}

impl GenerationResult {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            token_logprobs: None,
            knowledge_scores: None,
        }
    }

    fn check(&self) -> Result<(), BackendFailure> {
        if let Some(lps) = &self.token_logprobs {
            if let Some(bad) = lps.iter().find(|lp| !(lp.is_finite() && **lp <= 0.0)) {
                return Err(BackendFailure::MalformedResponse(format!(
                    "token logprob {bad} is not <= 0"
                )));
            }
        }
        if let Some(scores) = &self.knowledge_scores {
            if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
                return Err(BackendFailure::MalformedResponse(format!(
                    "knowledge score {bad} is outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub snippets: Vec<KnowledgeSnippet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector {
    components: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(components: Vec<f64>) -> Self {
        Self { components }
    }

    pub fn components(&self) -> &[f64] {
        &self.components
    }

    pub fn dimension(&self) -> usize {
        self.components.len()
    }

    pub fn norm(&self) -> f64 {
        self.components.iter().map(|c| c * c).sum::<f64>().sqrt()
    }
}

#[async_trait]
pub trait Generator: Send + Sync {
    async fn generate(&self, request: &GenerationRequest)
        -> Result<GenerationResult, BackendFailure>;
}

#[async_trait]
pub trait SearchEngine: Send + Sync {
    /// Ranked snippets for `query`, best first.
    async fn search(&self, query: &WebQuery, top_k: usize) -> Result<SearchResult, BackendFailure>;
}

#[async_trait]
pub trait Embedder: Send + Sync {
    async fn embed(&self, text: &str) -> Result<EmbeddingVector, BackendFailure>;
}

/// Shareable handle bundling the three capabilities with a per-call timeout.
#[derive(Clone)]
pub struct Backends {
    pub generator: Arc<dyn Generator>,
    pub search: Arc<dyn SearchEngine>,
    pub embedder: Arc<dyn Embedder>,
    pub timeout: Duration,
}

impl fmt::Debug for Backends {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Backends")
            .field("timeout", &self.timeout)
            .finish_non_exhaustive()
    }
}

impl Backends {
    pub fn new(
        generator: Arc<dyn Generator>,
        search: Arc<dyn SearchEngine>,
        embedder: Arc<dyn Embedder>,
    ) -> Self {
        Self {
            generator,
            search,
            embedder,
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    async fn bounded<T, F>(&self, stage: Stage, call: F) -> Result<T, BackendError>
    where
        F: std::future::Future<Output = Result<T, BackendFailure>>,
    {
        let failure = match tokio::time::timeout(self.timeout, call).await {
            Ok(Ok(value)) => return Ok(value),
            Ok(Err(failure)) => failure,
            Err(_) => BackendFailure::Timeout(self.timeout),
        };
        Err(BackendError { stage, failure })
    }

    pub async fn generate(
        &self,
        stage: Stage,
        request: &GenerationRequest,
    ) -> Result<GenerationResult, BackendError> {
        let invalid = |why: &str| BackendError {
            stage,
            failure: BackendFailure::InvalidRequest(why.to_owned()),
        };
        if request.prompt.is_empty() {
            return Err(invalid("prompt is empty"));
        }
        if request.max_new_tokens == 0 {
            return Err(invalid("max_new_tokens must be positive"));
        }
        let result = self
            .bounded(stage, self.generator.generate(request))
            .await?;
        result
            .check()
            .map_err(|failure| BackendError { stage, failure })?;
        Ok(result)
    }

    /// At most `top_k` snippets; `top_k == 0` is rejected.
    pub async fn search(&self, query: &WebQuery, top_k: usize) -> Result<SearchResult, BackendError> {
        let stage = Stage::Search;
        if top_k == 0 {
            return Err(BackendError {
                stage,
                failure: BackendFailure::InvalidRequest("top_k must be positive".into()),
            });
        }
        let mut result = self.bounded(stage, self.search.search(query, top_k)).await?;
        if result.snippets.is_empty() {
            return Err(BackendError {
                stage,
                failure: BackendFailure::EmptyResult,
            });
        }
        result.snippets.truncate(top_k);
        Ok(result)
    }

    pub async fn embed(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        let stage = Stage::Embed;
        if text.is_empty() {
            return Err(BackendError {
                stage,
                failure: BackendFailure::InvalidRequest("text is empty".into()),
            });
        }
        let vector = self.bounded(stage, self.embedder.embed(text)).await?;
        if vector.components.iter().any(|c| !c.is_finite()) {
            return Err(BackendError {
                stage,
                failure: BackendFailure::MalformedResponse("non-finite embedding".into()),
            });
        }
        Ok(vector)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hub(generator: ScriptedGenerator) -> Backends {
        Backends::new(
            Arc::new(generator),
            Arc::new(CorpusSearch::new(["Great Wall of China", "apple pie recipe"])),
            Arc::new(HashedTrigramEmbedder::default()),
        )
    }

    #[tokio::test(start_paused = true)]
    async fn slow_backend_times_out_with_stage() {
        let slow = ScriptedGenerator::echo().with_default_delay(Duration::from_secs(60));
        let backends = hub(slow).with_timeout(Duration::from_secs(15));
        let err = backends
            .generate(Stage::QueryGen, &GenerationRequest::new("p", 8))
            .await
            .unwrap_err();
        assert_eq!(err.stage, Stage::QueryGen);
        assert_eq!(err.failure, BackendFailure::Timeout(Duration::from_secs(15)));
    }

    #[tokio::test]
    async fn search_rejects_zero_top_k() {
        let backends = hub(ScriptedGenerator::echo());
        let q = WebQuery::new("Great Wall").unwrap();
        let err = backends.search(&q, 0).await.unwrap_err();
        assert!(matches!(err.failure, BackendFailure::InvalidRequest(_)));
    }

    #[tokio::test]
    async fn out_of_range_scores_are_malformed() {
        let generator = ScriptedGenerator::failing().with_reply(
            "p",
            ScriptedReply::text("x").with_knowledge_scores(vec![1.5]),
        );
        let backends = hub(generator);
        let err = backends
            .generate(
                Stage::Response,
                &GenerationRequest::new("p", 8).with_knowledge_scores(),
            )
            .await
            .unwrap_err();
        assert!(matches!(err.failure, BackendFailure::MalformedResponse(_)));
    }

    #[tokio::test]
    async fn empty_prompt_rejected() {
        let backends = hub(ScriptedGenerator::echo());
        let err = backends
            .generate(Stage::Response, &GenerationRequest::new("", 8))
            .await
            .unwrap_err();
        assert!(matches!(err.failure, BackendFailure::InvalidRequest(_)));
    }

    #[test]
    fn generation_wire_field_names() {
        let request = GenerationRequest::new("P", 16).with_knowledge_scores();
        let json = serde_json::to_value(&request).unwrap();
        assert_eq!(
            json,
            serde_json::json!({
                "prompt": "P",
                "max_new_tokens": 16,
                "want_token_logprobs": false,
                "want_knowledge_scores": true
            })
        );
        let bare: GenerationResult = serde_json::from_str(r#"{"text":"hi"}"#).unwrap();
        assert_eq!(bare, GenerationResult::text("hi"));
        assert_eq!(serde_json::to_string(&bare).unwrap(), r#"{"text":"hi"}"#);
    }
}
