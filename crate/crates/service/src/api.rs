//! The racetrack HTTP API.
//!
//! | route | body | answer |
//! |---|---|---|
//! | `POST /api/sessions` | | session view |
//! | `GET /api/sessions/{id}` | | session view |
//! | `POST /api/sessions/{id}/message` | `{text}` | `{turn_index, candidates:[{slot, text}]}` |
//! | `POST /api/sessions/{id}/select` | `{turn_index, slot}` | `{turn_index, slot, recorded, completed_turns}` |
//! | `POST /api/sessions/{id}/close` | | `{session_id, valid, completed_turns}` |
//! | `GET /api/ranking` | | `[{rank, selections}]` |
//! | `GET /api/topic-tip` | | opening |
//! | `GET /api/bots` | | `[{bot_id, mode}]`, admin only |
//!
//! Bot ids only leave the service through the two admin views, which need the
//! `x-admin-token` header.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use racetrack_core::arena::{
    generate_turn, parse_slot, slot_label, Arena, ArenaError, EventSink, Opening, OpeningPool,
    SessionView, SlotCandidate,
};
use racetrack_core::pipeline::PipelineMode;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const ADMIN_HEADER: &str = "x-admin-token";

pub type SharedSink = Box<dyn EventSink>;

/// Shared service state.
pub struct AppState {
    arena: Mutex<Arena<SharedSink>>,
    /// Serializes requests that touch the same session.
    session_locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
    openings: OpeningPool,
    tips: Mutex<ChaCha8Rng>,
    admin_token: Option<String>,
}

impl AppState {
    pub fn new(arena: Arena<SharedSink>, openings: OpeningPool, admin_token: Option<String>, seed: u64) -> Self {
        Self {
            arena: Mutex::new(arena),
            session_locks: Mutex::default(),
            openings,
            tips: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            admin_token,
        }
    }

    fn arena(&self) -> MutexGuard<'_, Arena<SharedSink>> {
        self.arena.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn session_lock(&self, id: &str) -> Arc<tokio::sync::Mutex<()>> {
        let mut locks = self.session_locks.lock().unwrap_or_else(|e| e.into_inner());
        locks.entry(id.to_owned()).or_default().clone()
    }

    fn is_admin(&self, headers: &HeaderMap) -> Result<bool, ApiError> {
        let Some(given) = headers.get(ADMIN_HEADER) else {
            return Ok(false);
        };
        match &self.admin_token {
            Some(token) if given.as_bytes() == token.as_bytes() => Ok(true),
            _ => Err(ApiError::Forbidden),
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/message", post(send_message))
        .route("/api/sessions/{id}/select", post(select))
        .route("/api/sessions/{id}/close", post(close))
        .route("/api/ranking", get(ranking))
        .route("/api/topic-tip", get(topic_tip))
        .route("/api/bots", get(bots))
        .with_state(state)
}

#[derive(Debug)]
pub enum ApiError {
    Arena(ArenaError),
    BadSlot(String),
    Forbidden,
}

impl From<ArenaError> for ApiError {
    fn from(e: ArenaError) -> Self {
        ApiError::Arena(e)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        use ArenaError::*;
        let (status, code, message) = match self {
            ApiError::BadSlot(s) => (StatusCode::BAD_REQUEST, "invalid_slot", format!("invalid slot {s}")),
            ApiError::Forbidden => (StatusCode::FORBIDDEN, "forbidden", "admin token rejected".into()),
            ApiError::Arena(e) => {
                let (status, code) = match &e {
                    UnknownSession(_) => (StatusCode::NOT_FOUND, "unknown_session"),
                    UnknownTurn(_) => (StatusCode::NOT_FOUND, "unknown_turn"),
                    SessionClosed => (StatusCode::CONFLICT, "session_closed"),
                    TurnPending(_) => (StatusCode::CONFLICT, "turn_pending"),
                    AlreadySelected(_) => (StatusCode::CONFLICT, "already_selected"),
                    SessionExists(_) => (StatusCode::CONFLICT, "session_exists"),
                    Inconsistent(_) => (StatusCode::CONFLICT, "inconsistent"),
                    InvalidSlot(_) => (StatusCode::BAD_REQUEST, "invalid_slot"),
                    EmptyMessage => (StatusCode::BAD_REQUEST, "empty_message"),
                    TooFewBots(_) => (StatusCode::SERVICE_UNAVAILABLE, "too_few_bots"),
                    DuplicateBot(_) => (StatusCode::SERVICE_UNAVAILABLE, "duplicate_bot"),
                    EmptyPool => (StatusCode::SERVICE_UNAVAILABLE, "empty_pool"),
                    AllBotsFailed => (StatusCode::BAD_GATEWAY, "all_bots_failed"),
                    Storage(_) => (StatusCode::INTERNAL_SERVER_ERROR, "storage_failure"),
                };
                (status, code, e.to_string())
            }
        };
        let body = ErrorBody {
            error: code.into(),
            message,
        };
        (status, Json(body)).into_response()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MessageBody {
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OfferedTurn {
    pub turn_index: usize,
    pub candidates: Vec<SlotCandidate>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectBody {
    pub turn_index: usize,
    pub slot: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Selected {
    pub turn_index: usize,
    pub slot: String,
    /// False when this repeats an earlier identical selection.
    pub recorded: bool,
    pub completed_turns: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Closed {
    pub session_id: String,
    pub valid: bool,
    pub completed_turns: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    /// Competition rank: bots with equal selections share a rank.
    pub rank: usize,
    pub selections: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bot_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_sessions: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BotRow {
    pub bot_id: String,
    pub mode: PipelineMode,
}

async fn create_session(State(app): State<Arc<AppState>>) -> Result<(StatusCode, Json<SessionView>), ApiError> {
    let mut arena = app.arena();
    let id = arena.create_session()?;
    let view = arena.state().session(&id)?.client_view();
    Ok((StatusCode::CREATED, Json(view)))
}

async fn get_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    Ok(Json(app.arena().state().session(&id)?.client_view()))
}

async fn send_message(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(body): Json<MessageBody>,
) -> Result<Json<OfferedTurn>, ApiError> {
    let lock = app.session_lock(&id);
    let _guard = lock.lock().await;
    let (request, roster) = {
        let arena = app.arena();
        (arena.prepare_turn(&id, &body.text)?, arena.roster())
    };
    // Bots run without holding the arena, so other sessions keep moving.
    let event = generate_turn(&request, &roster).await?;
    let mut arena = app.arena();
    arena.commit(event)?;
    let turn = arena.state().session(&id)?.turns.last().expect("turn just offered");
    Ok(Json(OfferedTurn {
        turn_index: turn.turn_index,
        candidates: turn.client_candidates(),
    }))
}

async fn select(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(body): Json<SelectBody>,
) -> Result<Json<Selected>, ApiError> {
    let slot = parse_slot(body.slot.trim()).ok_or_else(|| ApiError::BadSlot(body.slot.clone()))?;
    let lock = app.session_lock(&id);
    let _guard = lock.lock().await;
    let mut arena = app.arena();
    let recorded = arena.select_response(&id, body.turn_index, slot)?;
    Ok(Json(Selected {
        turn_index: body.turn_index,
        slot: slot_label(slot),
        recorded,
        completed_turns: arena.state().session(&id)?.completed_turns(),
    }))
}

async fn close(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Closed>, ApiError> {
    let lock = app.session_lock(&id);
    let _guard = lock.lock().await;
    let mut arena = app.arena();
    let valid = arena.close_session(&id)?;
    Ok(Json(Closed {
        completed_turns: arena.state().session(&id)?.completed_turns(),
        session_id: id,
        valid,
    }))
}

/// Ranking rows; bot ids only when `reveal` is set.
pub fn rank_rows(entries: &[racetrack_core::arena::RankingEntry], reveal: bool) -> Vec<RankRow> {
    let mut rows = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let rank = match rows.last() {
            Some(RankRow { rank, selections, .. }) if *selections == e.selections => *rank,
            _ => i + 1,
        };
        rows.push(RankRow {
            rank,
            selections: e.selections,
            bot_id: reveal.then(|| e.bot_id.clone()),
            valid_sessions: reveal.then_some(e.valid_sessions),
        });
    }
    rows
}

async fn ranking(State(app): State<Arc<AppState>>, headers: HeaderMap) -> Result<Json<Vec<RankRow>>, ApiError> {
    let reveal = app.is_admin(&headers)?;
    Ok(Json(rank_rows(&app.arena().ranking(), reveal)))
}

async fn topic_tip(State(app): State<Arc<AppState>>) -> Json<Opening> {
    let mut rng = app.tips.lock().unwrap_or_else(|e| e.into_inner());
    Json(app.openings.topic_tip(&mut *rng).clone())
}

async fn bots(State(app): State<Arc<AppState>>, headers: HeaderMap) -> Result<Json<Vec<BotRow>>, ApiError> {
    if !app.is_admin(&headers)? {
        return Err(ApiError::Forbidden);
    }
    let roster = app.arena().roster();
    Ok(Json(
        roster
            .descriptors()
            .into_iter()
            .map(|d| BotRow {
                bot_id: d.bot_id,
                mode: d.mode,
            })
            .collect(),
    ))
}
