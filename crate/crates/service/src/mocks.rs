//! In-process backends served over the `/v1/*` wire protocol, so the HTTP
//! client path can be exercised without real models.

use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use racetrack_core::backends::http::{
    EmbedRequestWire, EmbedResponseWire, SearchRequestWire, SearchResponseWire,
};
use racetrack_core::backends::{
    BackendFailure, Embedder, GenerationRequest, GenerationResult, Generator, SearchEngine,
};
use racetrack_core::types::WebQuery;

#[derive(Clone)]
pub struct MockBackends {
    pub generator: Arc<dyn Generator>,
    pub search: Arc<dyn SearchEngine>,
    pub embedder: Arc<dyn Embedder>,
}

pub fn router(backends: MockBackends) -> Router {
    Router::new()
        .route("/v1/generate", post(generate))
        .route("/v1/search", post(search))
        .route("/v1/embed", post(embed))
        .with_state(backends)
}

struct Failure(BackendFailure);

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        let status = match self.0 {
            BackendFailure::InvalidRequest(_) => StatusCode::BAD_REQUEST,
            BackendFailure::Timeout(_) => StatusCode::GATEWAY_TIMEOUT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, self.0.to_string()).into_response()
    }
}

async fn generate(
    State(b): State<MockBackends>,
    Json(request): Json<GenerationRequest>,
) -> Result<Json<GenerationResult>, Failure> {
    b.generator.generate(&request).await.map(Json).map_err(Failure)
}

async fn search(
    State(b): State<MockBackends>,
    Json(request): Json<SearchRequestWire>,
) -> Result<Json<SearchResponseWire>, Failure> {
    let query = WebQuery::new(request.query)
        .map_err(|e| Failure(BackendFailure::InvalidRequest(e.to_string())))?;
    match b.search.search(&query, request.top_k).await {
        Ok(result) => Ok(Json(SearchResponseWire::from(&result))),
        // Zero hits travel as an empty list.
        Err(BackendFailure::EmptyResult) => Ok(Json(SearchResponseWire { snippets: vec![] })),
        Err(e) => Err(Failure(e)),
    }
}

async fn embed(
    State(b): State<MockBackends>,
    Json(request): Json<EmbedRequestWire>,
) -> Result<Json<EmbedResponseWire>, Failure> {
    if request.text.trim().is_empty() {
        return Err(Failure(BackendFailure::InvalidRequest("text is empty".into())));
    }
    let vector = b.embedder.embed(&request.text).await.map_err(Failure)?;
    Ok(Json(EmbedResponseWire {
        vector: vector.components().to_vec(),
    }))
}
