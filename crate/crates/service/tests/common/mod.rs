#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use racetrack_core::arena::{Arena, EventSink, OpeningPool, Roster};
use racetrack_core::backends::{Backends, HttpBackend};
use racetrack_core::pipeline::{Pipeline, PipelineMode};
use racetrack_service::api::{self, AppState, SharedSink};
use racetrack_service::cli::mock_backends;
use racetrack_service::config::DEFAULT_OPENINGS;
use racetrack_service::eventlog::JsonlEventLog;
use racetrack_service::mocks;
use serde_json::Value;

pub const BOT_IDS: [&str; 6] = [
    "bot-aurora-17", "bot-basalt-42", "bot-cobalt-08", "bot-dune-93", "bot-ember-55", "bot-fjord-21",
];
pub const ADMIN_TOKEN: &str = "let-me-see";

pub async fn spawn(router: axum::Router) -> SocketAddr {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router).await.unwrap() });
    addr
}

/// One mock backend server per bot, each with its own fixed reply, reached
/// through the HTTP client.
pub async fn http_roster(bots: usize) -> Roster {
    let corpus = vec!["长城总长21196千米".to_owned(), "故宫位于北京".to_owned()];
    let mut roster = Roster::new();
    for (i, id) in BOT_IDS[..bots].iter().enumerate() {
        let addr = spawn(mocks::router(mock_backends(corpus.clone(), Some(format!("候选回复{i}")), 64))).await;
        let remote = Arc::new(HttpBackend::new(format!("http://{addr}"), Duration::from_secs(5)).unwrap());
        let mode = [PipelineMode::Full, PipelineMode::NoKnowledge, PipelineMode::PreClassifier][i % 3];
        let pipeline = Pipeline::new(Backends::new(remote.clone(), remote.clone(), remote));
        roster.insert(*id, mode, pipeline);
    }
    roster
}

/// Event sink that can be made to fail.
#[derive(Clone, Default)]
pub struct Switchable {
    pub events: Arc<Mutex<Vec<racetrack_core::arena::ArenaEvent>>>,
    pub broken: Arc<std::sync::atomic::AtomicBool>,
}

impl EventSink for Switchable {
    fn append(&mut self, event: &racetrack_core::arena::ArenaEvent) -> Result<(), String> {
        if self.broken.load(std::sync::atomic::Ordering::SeqCst) {
            return Err("no space left on device".into());
        }
        self.events.lock().unwrap().push(event.clone());
        Ok(())
    }
}

pub async fn spawn_api(roster: Roster, sink: SharedSink, seed: u64) -> SocketAddr {
    let arena = Arena::new(roster, sink, seed);
    spawn_arena(arena, seed).await
}

pub async fn spawn_arena(arena: Arena<SharedSink>, seed: u64) -> SocketAddr {
    let openings = OpeningPool::parse_jsonl(DEFAULT_OPENINGS).unwrap();
    let app = AppState::new(arena, openings, Some(ADMIN_TOKEN.into()), seed);
    spawn(api::router(Arc::new(app))).await
}

pub async fn spawn_logged_api(roster: Roster, log: &Path, seed: u64) -> SocketAddr {
    let (sink, state) = JsonlEventLog::open(log).unwrap();
    let arena = Arena::from_state(state, roster, Box::new(sink) as SharedSink, seed);
    spawn_arena(arena, seed).await
}

/// Client that keeps every response body it sees, for anonymity scans.
pub struct RecordingClient {
    pub base: String,
    http: reqwest::Client,
    pub traffic: Vec<String>,
}

impl RecordingClient {
    pub fn new(addr: SocketAddr) -> Self {
        Self {
            base: format!("http://{addr}"),
            http: reqwest::Client::new(),
            traffic: Vec::new(),
        }
    }

    pub async fn call(&mut self, method: &str, path: &str, body: Option<Value>) -> (u16, Value) {
        let url = format!("{}{path}", self.base);
        let mut req = match method {
            "GET" => self.http.get(&url),
            _ => self.http.post(&url),
        };
        if let Some(b) = body {
            req = req.json(&b);
        }
        let resp = req.send().await.unwrap();
        let status = resp.status().as_u16();
        let text = resp.text().await.unwrap();
        self.traffic.push(text.clone());
        (status, serde_json::from_str(&text).unwrap_or(Value::Null))
    }

    pub async fn admin_get(&self, path: &str) -> (u16, Value) {
        let resp = self
            .http
            .get(format!("{}{path}", self.base))
            .header(api::ADMIN_HEADER, ADMIN_TOKEN)
            .send()
            .await
            .unwrap();
        (resp.status().as_u16(), resp.json().await.unwrap_or(Value::Null))
    }

    /// Runs a session where pick `p` selects slot `p % candidates`.
    pub async fn session(&mut self, picks: &[usize], close: bool) -> String {
        let (status, view) = self.call("POST", "/api/sessions", None).await;
        assert_eq!(status, 201, "{view}");
        let id = view["session_id"].as_str().unwrap().to_owned();
        for (t, pick) in picks.iter().enumerate() {
            let (status, turn) = self
                .call("POST", &format!("/api/sessions/{id}/message"), Some(serde_json::json!({"text": format!("第{t}个问题：长城有多长")})))
                .await;
            assert_eq!(status, 200, "{turn}");
            let candidates = turn["candidates"].as_array().unwrap();
            let slot = candidates[pick % candidates.len()]["slot"].as_str().unwrap().to_owned();
            let (status, sel) = self
                .call("POST", &format!("/api/sessions/{id}/select"), Some(serde_json::json!({"turn_index": t + 1, "slot": slot})))
                .await;
            assert_eq!(status, 200, "{sel}");
        }
        if close {
            let (status, _) = self.call("POST", &format!("/api/sessions/{id}/close"), None).await;
            assert_eq!(status, 200);
        }
        id
    }
}
