//! JSON-over-HTTP client for remote backends.
//!
//! Routes: `POST /v1/generate`, `POST /v1/search`, `POST /v1/embed`.

use std::time::Duration;

use async_trait::async_trait;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{
    BackendFailure, Embedder, EmbeddingVector, GenerationRequest, GenerationResult, Generator,
    SearchEngine, SearchResult,
};
use crate::types::{KnowledgeSnippet, KnowledgeSource, WebQuery};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchRequestWire {
    pub query: String,
    pub top_k: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnippetWire {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchResponseWire {
    pub snippets: Vec<SnippetWire>,
}

impl From<&SearchResult> for SearchResponseWire {
    fn from(result: &SearchResult) -> Self {
        Self {
            snippets: result
                .snippets
                .iter()
                .map(|s| SnippetWire {
                    text: s.text.clone(),
                    provenance: s.provenance.clone(),
                })
                .collect(),
        }
    }
}

impl From<SearchResponseWire> for SearchResult {
    fn from(wire: SearchResponseWire) -> Self {
        let snippets = wire
            .snippets
            .into_iter()
            .map(|s| {
                let snippet = KnowledgeSnippet::new(s.text, KnowledgeSource::WebSearch);
                match s.provenance {
                    Some(p) => snippet.with_provenance(p),
                    None => snippet,
                }
            })
            .collect();
        SearchResult { snippets }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedRequestWire {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponseWire {
    pub vector: Vec<f64>,
}

/// One remote service; implements every capability against the same base URL.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    client: reqwest::Client,
    base_url: String,
}

impl HttpBackend {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Result<Self, BackendFailure> {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendFailure::Unavailable(e.to_string()))?;
        let base_url = base_url.into().trim_end_matches('/').to_owned();
        Ok(Self { client, base_url })
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    async fn post<Req, Resp>(&self, route: &str, body: &Req) -> Result<Resp, BackendFailure>
    where
        Req: Serialize + ?Sized,
        Resp: DeserializeOwned,
    {
        let url = format!("{}{route}", self.base_url);
        let response = self
            .client
            .post(&url)
            .json(body)
            .send()
            .await
            .map_err(transport_failure)?;
        let status = response.status();
        let bytes = response.bytes().await.map_err(transport_failure)?;
        if !status.is_success() {
            return Err(BackendFailure::Unavailable(format!(
                "{url} answered {status}: {}",
                String::from_utf8_lossy(&bytes)
            )));
        }
        serde_json::from_slice(&bytes)
            .map_err(|e| BackendFailure::MalformedResponse(format!("{url}: {e}")))
    }
}

fn transport_failure(err: reqwest::Error) -> BackendFailure {
    if err.is_timeout() {
        BackendFailure::Timeout(Duration::ZERO)
    } else if err.is_decode() {
        BackendFailure::MalformedResponse(err.to_string())
    } else {
        BackendFailure::Unavailable(err.to_string())
    }
}

#[async_trait]
impl Generator for HttpBackend {
    async fn generate(
        &self,
        request: &GenerationRequest,
    ) -> Result<GenerationResult, BackendFailure> {
        self.post("/v1/generate", request).await
    }
}

#[async_trait]
impl SearchEngine for HttpBackend {
    async fn search(&self, query: &WebQuery, top_k: usize) -> Result<SearchResult, BackendFailure> {
        let request = SearchRequestWire {
            query: query.as_str().to_owned(),
            top_k,
        };
        let wire: SearchResponseWire = self.post("/v1/search", &request).await?;
        if wire.snippets.is_empty() {
            return Err(BackendFailure::EmptyResult);
        }
        Ok(wire.into())
    }
}

#[async_trait]
impl Embedder for HttpBackend {
    async fn embed(&self, text: &str) -> Result<EmbeddingVector, BackendFailure> {
        let request = EmbedRequestWire {
            text: text.to_owned(),
        };
        let wire: EmbedResponseWire = self.post("/v1/embed", &request).await?;
        if wire.vector.is_empty() {
            return Err(BackendFailure::MalformedResponse("empty vector".into()));
        }
        Ok(EmbeddingVector::new(wire.vector))
    }
}
