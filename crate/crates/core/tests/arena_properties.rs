use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use proptest::prelude::*;
use racetrack_core::arena::*;
use racetrack_core::backends::{
    BackendFailure, Backends, CorpusSearch, Fallback, GenerationRequest, GenerationResult,
    Generator, HashedTrigramEmbedder, ScriptedGenerator,
};
use racetrack_core::pipeline::{Pipeline, PipelineMode};

const BOT_IDS: [&str; 6] = [
    "bot-aurora-17", "bot-basalt-42", "bot-cobalt-08", "bot-dune-93", "bot-ember-55", "bot-fjord-21",
];

fn pipeline_with(generator: Arc<dyn Generator>) -> Pipeline {
    Pipeline::new(Backends::new(
        generator,
        Arc::new(CorpusSearch::new(["长城总长21196千米", "故宫在北京"])),
        Arc::new(HashedTrigramEmbedder::default()),
    ))
}

fn roster(bots: usize) -> Roster {
    BOT_IDS[..bots].iter().enumerate().fold(Roster::new(), |r, (i, id)| {
        let mode = [PipelineMode::Full, PipelineMode::NoKnowledge, PipelineMode::PreClassifier][i % 3];
        let reply = Fallback::Fixed(format!("候选回复{i}"));
        r.with_bot(*id, mode, pipeline_with(Arc::new(ScriptedGenerator::new(reply))))
    })
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_current_thread().enable_all().start_paused(true).build().unwrap()
}

/// Runs scripted sessions: each inner vec is one session's slot picks.
fn simulate(bots: usize, sessions: &[Vec<usize>], seed: u64) -> Arena<MemorySink> {
    runtime().block_on(async {
        let mut arena = Arena::new(roster(bots), MemorySink::default(), seed).with_wall_clock(|| 42);
        for picks in sessions {
            let s = arena.create_session().unwrap();
            for (t, pick) in picks.iter().enumerate() {
                let turn = arena.submit_user_message(&s, &format!("第{t}个问题")).await.unwrap();
                let slot = pick % turn.candidates.len();
                arena.select_response(&s, t + 1, slot).unwrap();
            }
            arena.close_session(&s).unwrap();
        }
        arena
    })
}

/// Independent tally straight from the event log.
fn tally(events: &[ArenaEvent]) -> BTreeMap<String, u64> {
    let mut per_session: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut valid: BTreeMap<&str, bool> = BTreeMap::new();
    for e in events {
        match e {
            ArenaEvent::ResponseSelected { session_id, bot_id, .. } => {
                per_session.entry(session_id).or_default().push(bot_id)
            }
            ArenaEvent::SessionClosed { session_id, valid: v, .. } => {
                valid.insert(session_id, *v);
            }
            _ => {}
        }
    }
    let mut out = BTreeMap::new();
    for (s, bots) in per_session {
        if valid.get(s) == Some(&true) {
            for b in bots {
                *out.entry(b.to_owned()).or_insert(0) += 1;
            }
        }
    }
    out
}

fn sessions_strategy() -> impl Strategy<Value = Vec<Vec<usize>>> {
    prop::collection::vec(prop::collection::vec(0usize..6, 0..9), 1..5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn ranking_equals_event_log_tally(sessions in sessions_strategy(), seed in any::<u64>()) {
        let arena = simulate(6, &sessions, seed);
        let ranking = arena.ranking();
        let brute = tally(&arena.sink().events);
        let ours: BTreeMap<String, u64> = ranking.iter().filter(|e| e.selections > 0).map(|e| (e.bot_id.clone(), e.selections)).collect();
        prop_assert_eq!(ours, brute);
        let expected: usize = sessions.iter().filter(|p| p.len() > 5).map(Vec::len).sum();
        prop_assert_eq!(ranking.iter().map(|e| e.selections).sum::<u64>() as usize, expected);
        prop_assert!(ranking.windows(2).all(|w| (w[0].selections, &w[1].bot_id) >= (w[1].selections, &w[0].bot_id)));
    }

    #[test]
    fn replay_of_any_prefix_reaches_live_state(sessions in sessions_strategy(), seed in any::<u64>(), cut in 0.0f64..1.0) {
        let arena = simulate(4, &sessions, seed);
        let events = arena.sink().events.clone();
        let split = (events.len() as f64 * cut) as usize;
        let mut replayed = ArenaState::replay(events[..split].iter().cloned()).unwrap();
        for e in &events[split..] {
            replayed.apply(e.clone()).unwrap();
        }
        prop_assert_eq!(&replayed, arena.state());
        prop_assert_eq!(replayed.ranking(), arena.ranking());
    }

    #[test]
    fn same_seed_same_session(sessions in sessions_strategy(), seed in any::<u64>()) {
        let a = simulate(3, &sessions, seed);
        let b = simulate(3, &sessions, seed);
        prop_assert_eq!(a.state(), b.state());
        prop_assert_eq!(&a.sink().events, &b.sink().events);
    }

    #[test]
    fn permutation_round_trip(n in 1usize..12, seed in any::<u64>()) {
        let p = shuffle_permutation(n, seed);
        let mut seen = vec![false; n];
        for slot in &p {
            prop_assert!(!seen[*slot]);
            seen[*slot] = true;
        }
        let turn = ArenaTurn {
            turn_index: 1,
            user_message: racetrack_core::types::Utterance::user("q").unwrap(),
            candidates: (0..n).map(|i| Candidate { bot_id: format!("b{i}"), text: format!("t{i}"), timings: vec![] }).collect(),
            permutation: p.clone(),
            shuffle_seed: seed,
            failed_bots: vec![],
            selected: None,
        };
        let order = turn.slot_order();
        for (slot, candidate) in order.iter().enumerate() {
            prop_assert_eq!(p[*candidate], slot);
            prop_assert_eq!(&turn.candidate_in_slot(slot).unwrap().bot_id, &format!("b{candidate}"));
        }
        let shown: Vec<String> = turn.client_candidates().into_iter().map(|c| c.text).collect();
        let expected: Vec<String> = order.iter().map(|c| format!("t{c}")).collect();
        prop_assert_eq!(shown, expected);
    }

    #[test]
    fn open_session_views_never_name_bots(picks in prop::collection::vec(0usize..6, 0..8), seed in any::<u64>()) {
        runtime().block_on(async {
            let mut arena = Arena::new(roster(6), MemorySink::default(), seed);
            let s = arena.create_session().unwrap();
            for (t, pick) in picks.iter().enumerate() {
                let turn = arena.submit_user_message(&s, "你好").await.unwrap();
                let payload = serde_json::to_string(&turn.client_candidates()).unwrap();
                assert!(BOT_IDS.iter().all(|id| !payload.contains(id)));
                arena.select_response(&s, t + 1, pick % 6).unwrap();
                let view = serde_json::to_string(&arena.state().session(&s).unwrap().client_view()).unwrap();
                assert!(BOT_IDS.iter().all(|id| !view.contains(id)), "{view}");
            }
        });
    }
}

/// Records every prompt it is asked to complete.
#[derive(Default)]
struct Recorder {
    prompts: Mutex<Vec<String>>,
}

#[async_trait]
impl Generator for Recorder {
    async fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendFailure> {
        self.prompts.lock().unwrap().push(request.prompt.clone());
        Ok(GenerationResult::text("好的"))
    }
}

#[tokio::test]
async fn every_bot_sees_the_same_history() {
    let recorders: Vec<Arc<Recorder>> = (0..3).map(|_| Arc::new(Recorder::default())).collect();
    let roster = recorders.iter().enumerate().fold(Roster::new(), |r, (i, rec)| {
        r.with_bot(BOT_IDS[i], PipelineMode::NoKnowledge, pipeline_with(rec.clone()))
    });
    let mut arena = Arena::new(roster, MemorySink::default(), 9);
    let s = arena.create_session().unwrap();
    for t in 1..=4 {
        arena.submit_user_message(&s, &format!("message {t}")).await.unwrap();
        arena.select_response(&s, t, (t - 1) % 3).unwrap();
    }
    let first = recorders[0].prompts.lock().unwrap().clone();
    assert_eq!(first.len(), 4);
    for rec in &recorders[1..] {
        assert_eq!(*rec.prompts.lock().unwrap(), first);
    }
    assert_eq!(arena.state().session(&s).unwrap().unified_history.len(), 8);
}

#[tokio::test]
async fn storage_failure_leaves_state_untouched() {
    struct Full;
    impl EventSink for Full {
        fn append(&mut self, _: &ArenaEvent) -> Result<(), String> {
            Err("disk full".into())
        }
    }
    let mut arena = Arena::new(roster(2), Full, 1);
    assert_eq!(arena.create_session(), Err(ArenaError::Storage("disk full".into())));
    assert!(arena.state().is_empty());
}

#[test]
fn five_selected_turns_contribute_nothing() {
    let arena = simulate(6, &[vec![0, 1, 2, 3, 4], vec![0, 1, 2, 3, 4, 5]], 3);
    let total: u64 = arena.ranking().iter().map(|e| e.selections).sum();
    assert_eq!(total, 6);
}
