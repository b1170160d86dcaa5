mod common;

use std::sync::atomic::Ordering;

use common::*;
use racetrack_core::arena::{Arena, ArenaState};
use racetrack_service::api::SharedSink;
use racetrack_service::cli::replay_summary;
use racetrack_service::eventlog::{read_records, replay, JsonlEventLog};
use serde_json::{json, Value};

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn session_protocol_over_http_backends() {
    let addr = spawn_api(http_roster(6).await, Box::new(Switchable::default()), 11).await;
    let mut c = RecordingClient::new(addr);
    let (status, view) = c.call("POST", "/api/sessions", None).await;
    assert_eq!(status, 201);
    assert_eq!(view["bot_count"], 6);
    assert_eq!(view["state"], "open");
    let id = view["session_id"].as_str().unwrap().to_owned();

    let (status, turn) = c.call("POST", &format!("/api/sessions/{id}/message"), Some(json!({"text": "长城有多长？"}))).await;
    assert_eq!(status, 200);
    assert_eq!(turn["turn_index"], 1);
    let slots: Vec<&str> = turn["candidates"].as_array().unwrap().iter().map(|c| c["slot"].as_str().unwrap()).collect();
    assert_eq!(slots, ["A", "B", "C", "D", "E", "F"]);
    let mut texts: Vec<&str> = turn["candidates"].as_array().unwrap().iter().map(|c| c["text"].as_str().unwrap()).collect();
    texts.sort();
    assert_eq!(texts, (0..6).map(|i| format!("候选回复{i}")).collect::<Vec<_>>());

    // A second message before selecting is refused.
    let (status, err) = c.call("POST", &format!("/api/sessions/{id}/message"), Some(json!({"text": "还有吗"}))).await;
    assert_eq!((status, err["error"].as_str()), (409, Some("turn_pending")));

    let select = json!({"turn_index": 1, "slot": "C"});
    let (status, first) = c.call("POST", &format!("/api/sessions/{id}/select"), Some(select.clone())).await;
    assert_eq!(status, 200);
    assert_eq!(first["recorded"], true);
    // Retrying the same selection is a no-op success.
    let (status, again) = c.call("POST", &format!("/api/sessions/{id}/select"), Some(select)).await;
    assert_eq!((status, again["recorded"].as_bool()), (200, Some(false)));
    assert_eq!(again["completed_turns"], 1);
    let (status, err) = c.call("POST", &format!("/api/sessions/{id}/select"), Some(json!({"turn_index": 1, "slot": "D"}))).await;
    assert_eq!((status, err["error"].as_str()), (409, Some("already_selected")));
    let (status, _) = c.call("POST", &format!("/api/sessions/{id}/select"), Some(json!({"turn_index": 1, "slot": "7"}))).await;
    assert_eq!(status, 400);

    let (_, view) = c.call("GET", &format!("/api/sessions/{id}"), None).await;
    let history = view["history"].as_array().unwrap();
    assert_eq!(history.len(), 2);
    assert_eq!(history[1]["text"], turn["candidates"][2]["text"]);

    let (status, _) = c.call("POST", &format!("/api/sessions/{id}/message"), Some(json!({"text": "   "}))).await;
    assert_eq!(status, 400);
    let (status, _) = c.call("GET", "/api/sessions/session-999999", None).await;
    assert_eq!(status, 404);

    let (status, closed) = c.call("POST", &format!("/api/sessions/{id}/close"), None).await;
    assert_eq!(status, 200);
    assert_eq!(closed["valid"], false);
    let (status, _) = c.call("POST", &format!("/api/sessions/{id}/close"), None).await;
    assert_eq!(status, 409);

    for body in &c.traffic {
        for bot in BOT_IDS {
            assert!(!body.contains(bot), "{body}");
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn ranking_is_anonymous_until_admin_asks() {
    let addr = spawn_api(http_roster(3).await, Box::new(Switchable::default()), 5).await;
    let mut c = RecordingClient::new(addr);
    c.session(&[0, 0, 1, 2, 0, 1, 2], true).await;
    c.session(&[0, 1, 2, 0, 1], true).await;
    let (status, rows) = c.call("GET", "/api/ranking", None).await;
    assert_eq!(status, 200);
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.iter().map(|r| r["selections"].as_u64().unwrap()).sum::<u64>(), 7);
    assert!(rows.iter().all(|r| r.get("bot_id").is_none()));
    assert_eq!(rows[0]["rank"], 1);

    let (status, revealed) = c.admin_get("/api/ranking").await;
    assert_eq!(status, 200);
    assert!(revealed.as_array().unwrap().iter().all(|r| BOT_IDS.contains(&r["bot_id"].as_str().unwrap())));
    let (status, bots) = c.admin_get("/api/bots").await;
    assert_eq!(status, 200);
    assert_eq!(bots.as_array().unwrap().len(), 3);
    let (status, _) = c.call("GET", "/api/bots", None).await;
    assert_eq!(status, 403);

    let (status, tip) = c.call("GET", "/api/topic-tip", None).await;
    assert_eq!(status, 200);
    assert!(tip["text"].as_str().is_some_and(|t| !t.is_empty()));
    assert!(["chitchat", "knowledge"].contains(&tip["category"].as_str().unwrap()));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn restart_replays_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("events.jsonl");
    let roster = http_roster(4).await;
    let addr = spawn_logged_api(roster.clone(), &log, 21).await;
    let mut c = RecordingClient::new(addr);
    c.session(&[0, 1, 2, 3, 0, 1], true).await;
    c.session(&[3, 3, 3, 3, 3, 3, 3], true).await;
    c.session(&[1, 2], false).await;
    let (_, live) = c.admin_get("/api/ranking").await;

    let records = read_records(std::fs::File::open(&log).unwrap()).unwrap();
    assert!(records.iter().enumerate().all(|(i, r)| r.seq == i as u64 + 1));
    assert_eq!(replay_summary(&log).unwrap().sessions, 3);

    // A second process on the same log continues where the first stopped.
    let addr = spawn_logged_api(roster, &log, 21).await;
    let mut c2 = RecordingClient::new(addr);
    let (_, restarted) = c2.admin_get("/api/ranking").await;
    assert_eq!(restarted, live);
    let id = c2.session(&[0], false).await;
    assert_eq!(id, "session-000004");
    let (state, last) = replay(std::fs::File::open(&log).unwrap()).unwrap();
    assert_eq!(last as usize, records.len() + 3);
    assert_eq!(state.len(), 4);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn storage_failure_fails_the_call_and_keeps_state() {
    let sink = Switchable::default();
    let addr = spawn_api(http_roster(2).await, Box::new(sink.clone()), 2).await;
    let mut c = RecordingClient::new(addr);
    let id = c.session(&[0, 1], false).await;
    let (_, before) = c.call("GET", &format!("/api/sessions/{id}"), None).await;
    sink.broken.store(true, Ordering::SeqCst);
    let (status, err) = c.call("POST", &format!("/api/sessions/{id}/message"), Some(json!({"text": "再问一次"}))).await;
    assert_eq!((status, err["error"].as_str()), (500, Some("storage_failure")));
    let (status, _) = c.call("POST", "/api/sessions", None).await;
    assert_eq!(status, 500);
    let (_, after) = c.call("GET", &format!("/api/sessions/{id}"), None).await;
    assert_eq!(before, after);
    sink.broken.store(false, Ordering::SeqCst);
    let (status, turn) = c.call("POST", &format!("/api/sessions/{id}/message"), Some(json!({"text": "再问一次"}))).await;
    assert_eq!(status, 200);
    assert_eq!(turn["turn_index"], 3);
    let replayed = ArenaState::replay(sink.events.lock().unwrap().iter().cloned()).unwrap();
    let (_, view) = c.call("GET", &format!("/api/sessions/{id}"), None).await;
    assert_eq!(serde_json::to_value(replayed.session(&id).unwrap().client_view()).unwrap(), view);
}

#[cfg(target_os = "linux")]
#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn full_disk_log_refuses_events() {
    let file = std::fs::OpenOptions::new().write(true).open("/dev/full").unwrap();
    let log = JsonlEventLog::from_file(file, 0).unwrap();
    let mut arena = Arena::new(http_roster(2).await, Box::new(log) as SharedSink, 1);
    let err = arena.create_session().unwrap_err();
    assert!(err.to_string().contains("No space left"), "{err}");
    assert!(arena.state().is_empty());
    let _: Value = serde_json::to_value(arena.ranking()).unwrap();
}
