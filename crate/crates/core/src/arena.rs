//! The racetrack: one person chats with several anonymous bots at once.
//!
//! Every user message goes to all bots with the same history. Their replies
//! are shuffled into display slots `A`, `B`, ... and the person picks one,
//! which extends the shared history and counts as a vote for that bot.
//!
//! State only changes by applying [`ArenaEvent`]s, so an event log replays to
//! the exact same state.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use futures::future::join_all;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::{Pipeline, PipelineMode, StageTiming};
use crate::types::{DialogueHistory, Utterance};

/// Sessions need strictly more than five selected turns to count.
pub const MIN_VALID_TURNS: usize = 6;
pub const DEFAULT_BOT_COUNT: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ArenaError {
    #[error("a session needs at least 2 bots, got {0}")]
    TooFewBots(usize),
    #[error("bot {0} is listed twice")]
    DuplicateBot(String),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("session {0} already exists")]
    SessionExists(String),
    #[error("session is closed")]
    SessionClosed,
    #[error("turn {0} is still waiting for a selection")]
    TurnPending(usize),
    #[error("every bot failed to respond")]
    AllBotsFailed,
    #[error("unknown turn {0}")]
    UnknownTurn(usize),
    #[error("turn {0} already has a different selection")]
    AlreadySelected(usize),
    #[error("invalid slot {0}")]
    InvalidSlot(String),
    #[error("message is empty")]
    EmptyMessage,
    #[error("opening pool is empty")]
    EmptyPool,
    #[error("could not persist event: {0}")]
    Storage(String),
    #[error("event does not fit the current state: {0}")]
    Inconsistent(String),
}

/// Display label for a zero-based slot: `A`..`Z`, then `AA`, `AB`, ...
pub fn slot_label(index: usize) -> String {
    let mut n = index + 1;
    let mut out = Vec::new();
    while n > 0 {
        let rem = (n - 1) % 26;
        out.push(b'A' + rem as u8);
        n = (n - 1) / 26;
    }
    out.reverse();
    String::from_utf8(out).expect("ascii")
}

pub fn parse_slot(label: &str) -> Option<usize> {
    if label.is_empty() || !label.bytes().all(|b| b.is_ascii_uppercase()) {
        return None;
    }
    let mut n: usize = 0;
    for b in label.bytes() {
        n = n.checked_mul(26)?.checked_add((b - b'A') as usize + 1)?;
    }
    Some(n - 1)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BotDescriptor {
    pub bot_id: String,
    #[serde(default)]
    pub mode: PipelineMode,
}

impl BotDescriptor {
    pub fn new(bot_id: impl Into<String>, mode: PipelineMode) -> Self {
        Self {
            bot_id: bot_id.into(),
            mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub bot_id: String,
    pub text: String,
    pub timings: Vec<StageTiming>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BotFailure {
    pub bot_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub slot: usize,
    pub bot_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArenaTurn {
    /// 1-based.
    pub turn_index: usize,
    pub user_message: Utterance,
    pub candidates: Vec<Candidate>,
    /// `permutation[candidate] = slot`.
    pub permutation: Vec<usize>,
    pub shuffle_seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failed_bots: Vec<BotFailure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected: Option<Selection>,
}

impl ArenaTurn {
    /// Candidate indices in display order (`slot_order()[slot] = candidate`).
    pub fn slot_order(&self) -> Vec<usize> {
        invert(&self.permutation)
    }

    pub fn candidate_in_slot(&self, slot: usize) -> Option<&Candidate> {
        self.permutation
            .iter()
            .position(|s| *s == slot)
            .map(|c| &self.candidates[c])
    }
}

fn invert(permutation: &[usize]) -> Vec<usize> {
    let mut inverse = vec![0; permutation.len()];
    for (candidate, slot) in permutation.iter().enumerate() {
        inverse[*slot] = candidate;
    }
    inverse
}

fn is_bijection(permutation: &[usize]) -> bool {
    let mut seen = vec![false; permutation.len()];
    permutation.iter().all(|slot| {
        *slot < seen.len() && !std::mem::replace(&mut seen[*slot], true)
    })
}

/// Seeded shuffle of `n` candidates; returns `permutation[candidate] = slot`.
pub fn shuffle_permutation(n: usize, shuffle_seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    invert(&order)
}

/// Per-turn shuffle seed: stream `turn_index` of the session's generator.
pub fn turn_shuffle_seed(session_seed: u64, turn_index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(session_seed);
    rng.set_stream(turn_index as u64);
    rng.next_u64()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArenaSession {
    pub session_id: String,
    pub bots: Vec<BotDescriptor>,
    pub seed: u64,
    pub unified_history: DialogueHistory,
    pub turns: Vec<ArenaTurn>,
    pub state: SessionState,
    pub opened_at_ms: u64,
    pub closed_at_ms: Option<u64>,
    pub valid: Option<bool>,
}

impl ArenaSession {
    pub fn completed_turns(&self) -> usize {
        self.turns.iter().filter(|t| t.selected.is_some()).count()
    }

    pub fn pending_turn(&self) -> Option<&ArenaTurn> {
        self.turns.last().filter(|t| t.selected.is_none())
    }

    pub fn counts_toward_ranking(&self) -> bool {
        self.state == SessionState::Closed && self.valid == Some(true)
    }

    /// Anonymous view for clients.
    pub fn client_view(&self) -> SessionView {
        SessionView {
            session_id: self.session_id.clone(),
            state: self.state,
            bot_count: self.bots.len(),
            history: self
                .unified_history
                .utterances()
                .iter()
                .map(|u| ViewUtterance {
                    speaker: u.speaker().to_string(),
                    text: u.text().to_owned(),
                })
                .collect(),
            turns: self
                .turns
                .iter()
                .map(|t| TurnView {
                    turn_index: t.turn_index,
                    user_message: t.user_message.text().to_owned(),
                    candidates: t.client_candidates(),
                    selected_slot: t.selected.as_ref().map(|s| slot_label(s.slot)),
                })
                .collect(),
            completed_turns: self.completed_turns(),
            valid: self.valid,
        }
    }
}

impl ArenaTurn {
    pub fn client_candidates(&self) -> Vec<SlotCandidate> {
        self.slot_order()
            .into_iter()
            .enumerate()
            .map(|(slot, c)| SlotCandidate {
                slot: slot_label(slot),
                text: self.candidates[c].text.clone(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotCandidate {
    pub slot: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewUtterance {
    pub speaker: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnView {
    pub turn_index: usize,
    pub user_message: String,
    pub candidates: Vec<SlotCandidate>,
    pub selected_slot: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub state: SessionState,
    pub bot_count: usize,
    pub history: Vec<ViewUtterance>,
    pub turns: Vec<TurnView>,
    pub completed_turns: usize,
    pub valid: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum ArenaEvent {
    SessionCreated {
        session_id: String,
        bots: Vec<BotDescriptor>,
        seed: u64,
        opened_at_ms: u64,
    },
    TurnOffered {
        session_id: String,
        turn: ArenaTurn,
    },
    ResponseSelected {
        session_id: String,
        turn_index: usize,
        slot: usize,
        bot_id: String,
    },
    SessionClosed {
        session_id: String,
        closed_at_ms: u64,
        valid: bool,
    },
}

impl ArenaEvent {
    pub fn session_id(&self) -> &str {
        match self {
            ArenaEvent::SessionCreated { session_id, .. }
            | ArenaEvent::TurnOffered { session_id, .. }
            | ArenaEvent::ResponseSelected { session_id, .. }
            | ArenaEvent::SessionClosed { session_id, .. } => session_id,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ArenaEvent::SessionCreated { .. } => "SessionCreated",
            ArenaEvent::TurnOffered { .. } => "TurnOffered",
            ArenaEvent::ResponseSelected { .. } => "ResponseSelected",
            ArenaEvent::SessionClosed { .. } => "SessionClosed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingEntry {
    pub bot_id: String,
    pub selections: u64,
    pub valid_sessions: u64,
}

/// Everything a bot needs to answer one arena turn.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnRequest {
    pub session_id: String,
    pub turn_index: usize,
    pub user_message: Utterance,
    /// Unified history plus the new user message; identical for every bot.
    pub history: DialogueHistory,
    pub bots: Vec<BotDescriptor>,
    pub shuffle_seed: u64,
}

/// Pure arena state, changed only through [`ArenaState::apply`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ArenaState {
    sessions: BTreeMap<String, ArenaSession>,
}

impl ArenaState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn session(&self, session_id: &str) -> Result<&ArenaSession, ArenaError> {
        self.sessions
            .get(session_id)
            .ok_or_else(|| ArenaError::UnknownSession(session_id.to_owned()))
    }

    pub fn sessions(&self) -> impl Iterator<Item = &ArenaSession> {
        self.sessions.values()
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    fn open_session(&self, session_id: &str) -> Result<&ArenaSession, ArenaError> {
        let session = self.session(session_id)?;
        if session.state == SessionState::Closed {
            return Err(ArenaError::SessionClosed);
        }
        Ok(session)
    }

    pub fn plan_create(
        &self,
        session_id: impl Into<String>,
        bots: Vec<BotDescriptor>,
        seed: u64,
        now_ms: u64,
    ) -> Result<ArenaEvent, ArenaError> {
        let session_id = session_id.into();
        if self.sessions.contains_key(&session_id) {
            return Err(ArenaError::SessionExists(session_id));
        }
        if bots.len() < 2 {
            return Err(ArenaError::TooFewBots(bots.len()));
        }
        let mut seen = BTreeSet::new();
        for bot in &bots {
            if !seen.insert(bot.bot_id.as_str()) {
                return Err(ArenaError::DuplicateBot(bot.bot_id.clone()));
            }
        }
        Ok(ArenaEvent::SessionCreated {
            session_id,
            bots,
            seed,
            opened_at_ms: now_ms,
        })
    }

    pub fn prepare_turn(&self, session_id: &str, text: &str) -> Result<TurnRequest, ArenaError> {
        let session = self.open_session(session_id)?;
        if let Some(pending) = session.pending_turn() {
            return Err(ArenaError::TurnPending(pending.turn_index));
        }
        let user_message = Utterance::user(text.trim()).map_err(|_| ArenaError::EmptyMessage)?;
        let mut history = session.unified_history.clone();
        history
            .push(user_message.clone())
            .map_err(|e| ArenaError::Inconsistent(e.to_string()))?;
        let turn_index = session.turns.len() + 1;
        Ok(TurnRequest {
            session_id: session_id.to_owned(),
            turn_index,
            user_message,
            history,
            bots: session.bots.clone(),
            shuffle_seed: turn_shuffle_seed(session.seed, turn_index),
        })
    }

    /// `Ok(None)` when the same slot was already selected.
    pub fn plan_select(
        &self,
        session_id: &str,
        turn_index: usize,
        slot: usize,
    ) -> Result<Option<ArenaEvent>, ArenaError> {
        let session = self.session(session_id)?;
        let turn = turn_index
            .checked_sub(1)
            .and_then(|i| session.turns.get(i))
            .ok_or(ArenaError::UnknownTurn(turn_index))?;
        if let Some(selected) = &turn.selected {
            return if selected.slot == slot {
                Ok(None)
            } else {
                Err(ArenaError::AlreadySelected(turn_index))
            };
        }
        if session.state == SessionState::Closed {
            return Err(ArenaError::SessionClosed);
        }
        let candidate = turn
            .candidate_in_slot(slot)
            .ok_or_else(|| ArenaError::InvalidSlot(slot_label(slot)))?;
        Ok(Some(ArenaEvent::ResponseSelected {
            session_id: session_id.to_owned(),
            turn_index,
            slot,
            bot_id: candidate.bot_id.clone(),
        }))
    }

    pub fn plan_close(&self, session_id: &str, now_ms: u64) -> Result<ArenaEvent, ArenaError> {
        let session = self.open_session(session_id)?;
        Ok(ArenaEvent::SessionClosed {
            session_id: session_id.to_owned(),
            closed_at_ms: now_ms,
            valid: session.completed_turns() >= MIN_VALID_TURNS,
        })
    }

    /// Checks that `event` can be applied without changing anything.
    pub fn check(&self, event: &ArenaEvent) -> Result<(), ArenaError> {
        let bad = |msg: String| Err(ArenaError::Inconsistent(msg));
        match event {
            ArenaEvent::SessionCreated {
                session_id,
                bots,
                seed,
                opened_at_ms,
            } => self
                .plan_create(session_id.clone(), bots.clone(), *seed, *opened_at_ms)
                .map(drop),
            ArenaEvent::TurnOffered { session_id, turn } => {
                let session = self.open_session(session_id)?;
                if let Some(pending) = session.pending_turn() {
                    return Err(ArenaError::TurnPending(pending.turn_index));
                }
                if turn.turn_index != session.turns.len() + 1 {
                    return bad(format!(
                        "turn {} offered after {} turns",
                        turn.turn_index,
                        session.turns.len()
                    ));
                }
                if turn.selected.is_some() {
                    return bad("offered turn already has a selection".into());
                }
                if turn.candidates.is_empty() {
                    return Err(ArenaError::AllBotsFailed);
                }
                if turn.permutation.len() != turn.candidates.len() || !is_bijection(&turn.permutation) {
                    return bad("permutation is not a bijection over the candidates".into());
                }
                let known: BTreeSet<&str> = session.bots.iter().map(|b| b.bot_id.as_str()).collect();
                let mut answering = BTreeSet::new();
                for id in turn
                    .candidates
                    .iter()
                    .map(|c| c.bot_id.as_str())
                    .chain(turn.failed_bots.iter().map(|f| f.bot_id.as_str()))
                {
                    if !known.contains(id) || !answering.insert(id) {
                        return bad(format!("bot {id} is not a distinct session member"));
                    }
                }
                let mut history = session.unified_history.clone();
                history
                    .push(turn.user_message.clone())
                    .map_err(|e| ArenaError::Inconsistent(e.to_string()))?;
                Ok(())
            }
            ArenaEvent::ResponseSelected {
                session_id,
                turn_index,
                slot,
                bot_id,
            } => match self.plan_select(session_id, *turn_index, *slot)? {
                Some(ArenaEvent::ResponseSelected { bot_id: expected, .. }) if expected == *bot_id => {
                    Ok(())
                }
                Some(_) => bad(format!("slot {slot} does not belong to {bot_id}")),
                None => bad(format!("turn {turn_index} is already selected")),
            },
            ArenaEvent::SessionClosed {
                session_id, valid, ..
            } => {
                let session = self.open_session(session_id)?;
                if *valid != (session.completed_turns() >= MIN_VALID_TURNS) {
                    return bad("validity verdict disagrees with the completed turns".into());
                }
                Ok(())
            }
        }
    }

    pub fn apply(&mut self, event: ArenaEvent) -> Result<(), ArenaError> {
        self.check(&event)?;
        match event {
            ArenaEvent::SessionCreated {
                session_id,
                bots,
                seed,
                opened_at_ms,
            } => {
                self.sessions.insert(
                    session_id.clone(),
                    ArenaSession {
                        session_id,
                        bots,
                        seed,
                        unified_history: DialogueHistory::new(),
                        turns: Vec::new(),
                        state: SessionState::Open,
                        opened_at_ms,
                        closed_at_ms: None,
                        valid: None,
                    },
                );
            }
            ArenaEvent::TurnOffered { session_id, turn } => {
                let session = self.sessions.get_mut(&session_id).expect("checked");
                session.turns.push(turn);
            }
            ArenaEvent::ResponseSelected {
                session_id,
                turn_index,
                slot,
                bot_id,
            } => {
                let session = self.sessions.get_mut(&session_id).expect("checked");
                let turn = &mut session.turns[turn_index - 1];
                let response = turn.candidate_in_slot(slot).expect("checked").text.clone();
                turn.selected = Some(Selection { slot, bot_id });
                let user = turn.user_message.clone();
                let response = Utterance::system(response)
                    .map_err(|e| ArenaError::Inconsistent(e.to_string()))?;
                session
                    .unified_history
                    .push(user)
                    .and_then(|_| session.unified_history.push(response))
                    .map_err(|e| ArenaError::Inconsistent(e.to_string()))?;
            }
            ArenaEvent::SessionClosed {
                session_id,
                closed_at_ms,
                valid,
            } => {
                let session = self.sessions.get_mut(&session_id).expect("checked");
                session.state = SessionState::Closed;
                session.closed_at_ms = Some(closed_at_ms);
                session.valid = Some(valid);
            }
        }
        Ok(())
    }

    pub fn replay<I>(events: I) -> Result<Self, ArenaError>
    where
        I: IntoIterator<Item = ArenaEvent>,
    {
        let mut state = Self::new();
        for event in events {
            state.apply(event)?;
        }
        Ok(state)
    }

    /// Selection counts over valid closed sessions, most selected first, ties
    /// by bot id.
    pub fn ranking(&self) -> Vec<RankingEntry> {
        let mut table: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
        for session in self.sessions.values().filter(|s| s.counts_toward_ranking()) {
            for bot in &session.bots {
                table.entry(&bot.bot_id).or_default().1 += 1;
            }
            for selection in session.turns.iter().filter_map(|t| t.selected.as_ref()) {
                table.entry(&selection.bot_id).or_default().0 += 1;
            }
        }
        let mut entries: Vec<RankingEntry> = table
            .into_iter()
            .map(|(bot_id, (selections, valid_sessions))| RankingEntry {
                bot_id: bot_id.to_owned(),
                selections,
                valid_sessions,
            })
            .collect();
        entries.sort_by(|a, b| b.selections.cmp(&a.selections).then_with(|| a.bot_id.cmp(&b.bot_id)));
        entries
    }
}

/// A bot's public descriptor plus the pipeline that answers for it.
#[derive(Debug, Clone)]
pub struct Bot {
    pub descriptor: BotDescriptor,
    pub pipeline: Pipeline,
}

#[derive(Debug, Clone, Default)]
pub struct Roster {
    bots: BTreeMap<String, Bot>,
}

impl Roster {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_bot(mut self, bot_id: impl Into<String>, mode: PipelineMode, pipeline: Pipeline) -> Self {
        self.insert(bot_id, mode, pipeline);
        self
    }

    pub fn insert(&mut self, bot_id: impl Into<String>, mode: PipelineMode, pipeline: Pipeline) {
        let bot_id = bot_id.into();
        self.bots.insert(
            bot_id.clone(),
            Bot {
                descriptor: BotDescriptor::new(bot_id, mode),
                pipeline,
            },
        );
    }

    pub fn get(&self, bot_id: &str) -> Option<&Bot> {
        self.bots.get(bot_id)
    }

    pub fn descriptors(&self) -> Vec<BotDescriptor> {
        self.bots.values().map(|b| b.descriptor.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.bots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bots.is_empty()
    }
}

/// Runs every bot on the request's history concurrently and shuffles the
/// answers. Bots that fail are left out of the candidates and listed in
/// `failed_bots`.
pub async fn generate_turn(request: &TurnRequest, roster: &Roster) -> Result<ArenaEvent, ArenaError> {
    let answers = join_all(request.bots.iter().map(|descriptor| async move {
        let Some(bot) = roster.get(&descriptor.bot_id) else {
            return Err(BotFailure {
                bot_id: descriptor.bot_id.clone(),
                error: "bot is not in the roster".into(),
            });
        };
        bot.pipeline
            .run_turn(&request.history, descriptor.mode)
            .await
            .map(|t| Candidate {
                bot_id: descriptor.bot_id.clone(),
                text: t.response.text().to_owned(),
                timings: t.timings,
            })
            .map_err(|e| BotFailure {
                bot_id: descriptor.bot_id.clone(),
                error: e.to_string(),
            })
    }))
    .await;

    let mut candidates = Vec::new();
    let mut failed_bots = Vec::new();
    for answer in answers {
        match answer {
            Ok(c) => candidates.push(c),
            Err(f) => failed_bots.push(f),
        }
    }
    if candidates.is_empty() {
        return Err(ArenaError::AllBotsFailed);
    }
    let permutation = shuffle_permutation(candidates.len(), request.shuffle_seed);
    Ok(ArenaEvent::TurnOffered {
        session_id: request.session_id.clone(),
        turn: ArenaTurn {
            turn_index: request.turn_index,
            user_message: request.user_message.clone(),
            candidates,
            permutation,
            shuffle_seed: request.shuffle_seed,
            failed_bots,
            selected: None,
        },
    })
}

/// Where events go before they are applied.
pub trait EventSink: Send {
    fn append(&mut self, event: &ArenaEvent) -> Result<(), String>;
}

impl<S: EventSink + ?Sized> EventSink for Box<S> {
    fn append(&mut self, event: &ArenaEvent) -> Result<(), String> {
        (**self).append(event)
    }
}

/// Keeps events in memory.
#[derive(Debug, Clone, Default)]
pub struct MemorySink {
    pub events: Vec<ArenaEvent>,
}

impl EventSink for MemorySink {
    fn append(&mut self, event: &ArenaEvent) -> Result<(), String> {
        self.events.push(event.clone());
        Ok(())
    }
}

fn system_now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Arena state plus persistence and bots.
///
/// Events are appended to the sink first and applied only if that succeeds,
/// so a storage failure leaves the state untouched.
pub struct Arena<S: EventSink> {
    state: ArenaState,
    roster: Arc<Roster>,
    sink: S,
    master_seed: u64,
    now_ms: Box<dyn Fn() -> u64 + Send + Sync>,
}

impl<S: EventSink> std::fmt::Debug for Arena<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Arena")
            .field("sessions", &self.state.len())
            .field("bots", &self.roster.len())
            .finish_non_exhaustive()
    }
}

impl<S: EventSink> Arena<S> {
    pub fn new(roster: Roster, sink: S, master_seed: u64) -> Self {
        Self::from_state(ArenaState::new(), roster, sink, master_seed)
    }

    pub fn from_state(state: ArenaState, roster: Roster, sink: S, master_seed: u64) -> Self {
        Self {
            state,
            roster: Arc::new(roster),
            sink,
            master_seed,
            now_ms: Box::new(system_now_ms),
        }
    }

    pub fn with_wall_clock(mut self, now_ms: impl Fn() -> u64 + Send + Sync + 'static) -> Self {
        self.now_ms = Box::new(now_ms);
        self
    }

    pub fn state(&self) -> &ArenaState {
        &self.state
    }

    pub fn roster(&self) -> Arc<Roster> {
        self.roster.clone()
    }

    pub fn sink(&self) -> &S {
        &self.sink
    }

    pub fn now_ms(&self) -> u64 {
        (self.now_ms)()
    }

    /// Persists then applies.
    pub fn commit(&mut self, event: ArenaEvent) -> Result<(), ArenaError> {
        self.state.check(&event)?;
        self.sink.append(&event).map_err(ArenaError::Storage)?;
        self.state.apply(event)
    }

    /// Opens a session with every bot in the roster.
    pub fn create_session(&mut self) -> Result<String, ArenaError> {
        self.create_session_with(self.roster.descriptors())
    }

    pub fn create_session_with(&mut self, bots: Vec<BotDescriptor>) -> Result<String, ArenaError> {
        let index = self.state.len() + 1;
        let session_id = format!("session-{index:06}");
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(index as u64);
        let event = self.state.plan_create(session_id.clone(), bots, rng.random(), self.now_ms())?;
        self.commit(event)?;
        Ok(session_id)
    }

    pub fn prepare_turn(&self, session_id: &str, text: &str) -> Result<TurnRequest, ArenaError> {
        self.state.prepare_turn(session_id, text)
    }

    pub async fn submit_user_message(&mut self, session_id: &str, text: &str) -> Result<&ArenaTurn, ArenaError> {
        let request = self.state.prepare_turn(session_id, text)?;
        let event = generate_turn(&request, &self.roster).await?;
        self.commit(event)?;
        Ok(self.state.session(session_id)?.turns.last().expect("just offered"))
    }

    /// Returns whether a new selection was recorded (false for a repeat).
    pub fn select_response(&mut self, session_id: &str, turn_index: usize, slot: usize) -> Result<bool, ArenaError> {
        match self.state.plan_select(session_id, turn_index, slot)? {
            Some(event) => self.commit(event).map(|_| true),
            None => Ok(false),
        }
    }

    /// Returns the validity verdict.
    pub fn close_session(&mut self, session_id: &str) -> Result<bool, ArenaError> {
        let event = self.state.plan_close(session_id, self.now_ms())?;
        let valid = matches!(event, ArenaEvent::SessionClosed { valid: true, .. });
        self.commit(event)?;
        Ok(valid)
    }

    pub fn ranking(&self) -> Vec<RankingEntry> {
        self.state.ranking()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpeningCategory {
    Chitchat,
    Knowledge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    What,
    Who,
    Where,
    When,
    Count,
    Comparison,
    SelectAmong,
    Verify,
    How,
    Why,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Opening {
    pub id: String,
    pub text: String,
    pub category: OpeningCategory,
    pub question_type: QuestionType,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OpeningPoolError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("opening pool is empty")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpeningPool {
    openings: Vec<Opening>,
}

impl OpeningPool {
    pub fn new(openings: Vec<Opening>) -> Result<Self, OpeningPoolError> {
        if openings.is_empty() {
            return Err(OpeningPoolError::Empty);
        }
        Ok(Self { openings })
    }

    /// One JSON object per line; blank lines are skipped.
    pub fn parse_jsonl(text: &str) -> Result<Self, OpeningPoolError> {
        let openings = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| OpeningPoolError::Parse {
                    line: i + 1,
                    reason: e.to_string(),
                })
            })
            .collect::<Result<Vec<Opening>, _>>()?;
        Self::new(openings)
    }

    pub fn openings(&self) -> &[Opening] {
        &self.openings
    }

    pub fn len(&self) -> usize {
        self.openings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.openings.is_empty()
    }

    pub fn of_category(&self, category: OpeningCategory) -> impl Iterator<Item = &Opening> {
        self.openings.iter().filter(move |o| o.category == category)
    }

    /// Uniform draw.
    pub fn topic_tip<R: Rng + ?Sized>(&self, rng: &mut R) -> &Opening {
        &self.openings[rng.random_range(0..self.openings.len())]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{Backends, CorpusSearch, Fallback, HashedTrigramEmbedder, ScriptedGenerator};

    fn pipeline(reply: &str) -> Pipeline {
        Pipeline::new(Backends::new(
            Arc::new(ScriptedGenerator::new(Fallback::Fixed(reply.into()))),
            Arc::new(CorpusSearch::new(["some background text"])),
            Arc::new(HashedTrigramEmbedder::default()),
        ))
    }

    fn roster(n: usize) -> Roster {
        (0..n).fold(Roster::new(), |r, i| {
            r.with_bot(format!("bot-{i}"), PipelineMode::NoKnowledge, pipeline(&format!("reply number {i}")))
        })
    }

    fn arena(n: usize) -> Arena<MemorySink> {
        Arena::new(roster(n), MemorySink::default(), 7).with_wall_clock(|| 1_000)
    }

    #[test]
    fn slot_labels_round_trip() {
        assert_eq!(slot_label(0), "A");
        assert_eq!(slot_label(25), "Z");
        assert_eq!(slot_label(26), "AA");
        for i in 0..800 {
            assert_eq!(parse_slot(&slot_label(i)), Some(i));
        }
        assert_eq!(parse_slot("a"), None);
        assert_eq!(parse_slot(""), None);
    }

    #[test]
    fn permutation_is_bijection_and_seeded() {
        for n in 1..10 {
            let p = shuffle_permutation(n, 42);
            assert!(is_bijection(&p));
            assert_eq!(invert(&invert(&p)), p);
            assert_eq!(p, shuffle_permutation(n, 42));
        }
        assert_ne!(turn_shuffle_seed(1, 1), turn_shuffle_seed(1, 2));
    }

    #[test]
    fn too_few_and_duplicate_bots() {
        let state = ArenaState::new();
        let one = vec![BotDescriptor::new("a", PipelineMode::Full)];
        assert_eq!(state.plan_create("s", one.clone(), 0, 0), Err(ArenaError::TooFewBots(1)));
        let dup = vec![one[0].clone(), one[0].clone()];
        assert_eq!(state.plan_create("s", dup, 0, 0), Err(ArenaError::DuplicateBot("a".into())));
    }

    #[tokio::test]
    async fn turn_state_machine() {
        let mut a = arena(3);
        let s = a.create_session().unwrap();
        let turn = a.submit_user_message(&s, "hello").await.unwrap();
        assert_eq!(turn.candidates.len(), 3);
        assert_eq!(turn.turn_index, 1);
        assert_eq!(
            a.submit_user_message(&s, "again").await.unwrap_err(),
            ArenaError::TurnPending(1)
        );
        assert_eq!(a.select_response(&s, 1, 3), Err(ArenaError::InvalidSlot("D".into())));
        assert!(a.select_response(&s, 1, 1).unwrap());
        assert!(!a.select_response(&s, 1, 1).unwrap());
        assert_eq!(a.select_response(&s, 1, 0), Err(ArenaError::AlreadySelected(1)));
        let session = a.state().session(&s).unwrap();
        assert_eq!(session.unified_history.len(), 2);
        let chosen = session.turns[0].candidate_in_slot(1).unwrap();
        assert_eq!(session.unified_history.utterances()[1].text(), chosen.text);
        assert_eq!(session.turns[0].selected.as_ref().unwrap().bot_id, chosen.bot_id);

        assert!(!a.close_session(&s).unwrap());
        assert_eq!(a.close_session(&s), Err(ArenaError::SessionClosed));
        assert_eq!(
            a.submit_user_message(&s, "late").await.unwrap_err(),
            ArenaError::SessionClosed
        );
    }

    #[tokio::test]
    async fn validity_is_strictly_more_than_five() {
        for (turns, valid) in [(0, false), (5, false), (6, true)] {
            let mut a = arena(2);
            let s = a.create_session().unwrap();
            for t in 1..=turns {
                a.submit_user_message(&s, "hi").await.unwrap();
                a.select_response(&s, t, 0).unwrap();
            }
            assert_eq!(a.close_session(&s).unwrap(), valid, "{turns} turns");
            let total: u64 = a.ranking().iter().map(|e| e.selections).sum();
            assert_eq!(total, if valid { 6 } else { 0 });
        }
    }

    #[tokio::test]
    async fn failed_bot_is_excluded_and_recorded() {
        let broken = Pipeline::new(Backends::new(
            Arc::new(ScriptedGenerator::failing()),
            Arc::new(CorpusSearch::new(["x"])),
            Arc::new(HashedTrigramEmbedder::default()),
        ));
        let r = roster(2).with_bot("bot-broken", PipelineMode::NoKnowledge, broken);
        let mut a = Arena::new(r, MemorySink::default(), 1);
        let s = a.create_session().unwrap();
        let turn = a.submit_user_message(&s, "hi").await.unwrap();
        assert_eq!(turn.candidates.len(), 2);
        assert_eq!(turn.failed_bots.len(), 1);
        assert_eq!(turn.failed_bots[0].bot_id, "bot-broken");
    }

    #[tokio::test]
    async fn all_failed_bots_error() {
        let r = Roster::new().with_bot("a", PipelineMode::NoKnowledge, pipeline("x"));
        let mut a = Arena::new(r, MemorySink::default(), 1);
        let s = a
            .create_session_with(vec![
                BotDescriptor::new("ghost-1", PipelineMode::Full),
                BotDescriptor::new("ghost-2", PipelineMode::Full),
            ])
            .unwrap();
        assert_eq!(
            a.submit_user_message(&s, "hi").await.unwrap_err(),
            ArenaError::AllBotsFailed
        );
        assert!(a.state().session(&s).unwrap().turns.is_empty());
    }

    #[test]
    fn ranking_sums_valid_sessions_with_tie_break() {
        let mut state = ArenaState::new();
        let bots = vec![
            BotDescriptor::new("b2", PipelineMode::Full),
            BotDescriptor::new("b1", PipelineMode::Full),
        ];
        // Two valid sessions: {b1: 7, b2: 3} and {b1: 1, b2: 5}; the totals tie.
        for (sid, picks) in [("s1", [7, 3]), ("s2", [1, 5])] {
            state.apply(state.plan_create(sid, bots.clone(), 3, 0).unwrap()).unwrap();
            let plan: Vec<&str> = std::iter::repeat_n("b1", picks[0])
                .chain(std::iter::repeat_n("b2", picks[1]))
                .collect();
            for bot in plan {
                let req = state.prepare_turn(sid, "q").unwrap();
                let candidates = vec![
                    Candidate { bot_id: "b1".into(), text: "one".into(), timings: vec![] },
                    Candidate { bot_id: "b2".into(), text: "two".into(), timings: vec![] },
                ];
                let permutation = shuffle_permutation(2, req.shuffle_seed);
                let turn = ArenaTurn {
                    turn_index: req.turn_index,
                    user_message: req.user_message.clone(),
                    candidates,
                    permutation: permutation.clone(),
                    shuffle_seed: req.shuffle_seed,
                    failed_bots: vec![],
                    selected: None,
                };
                state
                    .apply(ArenaEvent::TurnOffered { session_id: sid.into(), turn })
                    .unwrap();
                let slot = permutation[if bot == "b1" { 0 } else { 1 }];
                let ev = state.plan_select(sid, req.turn_index, slot).unwrap().unwrap();
                state.apply(ev).unwrap();
            }
            state.apply(state.plan_close(sid, 1).unwrap()).unwrap();
        }
        let ranking = state.ranking();
        assert_eq!(
            ranking,
            vec![
                RankingEntry { bot_id: "b1".into(), selections: 8, valid_sessions: 2 },
                RankingEntry { bot_id: "b2".into(), selections: 8, valid_sessions: 2 },
            ]
        );
    }

    #[test]
    fn inconsistent_events_rejected() {
        let mut state = ArenaState::new();
        let ev = ArenaEvent::SessionClosed { session_id: "nope".into(), closed_at_ms: 0, valid: false };
        assert_eq!(state.apply(ev), Err(ArenaError::UnknownSession("nope".into())));
        let bots = vec![
            BotDescriptor::new("a", PipelineMode::Full),
            BotDescriptor::new("b", PipelineMode::Full),
        ];
        state.apply(state.plan_create("s", bots, 0, 0).unwrap()).unwrap();
        let lie = ArenaEvent::SessionClosed { session_id: "s".into(), closed_at_ms: 0, valid: true };
        assert!(matches!(state.apply(lie), Err(ArenaError::Inconsistent(_))));
    }

    #[test]
    fn event_json_shape() {
        let ev = ArenaEvent::SessionClosed { session_id: "s".into(), closed_at_ms: 5, valid: true };
        let json = serde_json::to_value(&ev).unwrap();
        assert_eq!(json["kind"], "SessionClosed");
        assert_eq!(json["payload"]["valid"], true);
        let back: ArenaEvent = serde_json::from_value(json).unwrap();
        assert_eq!(back, ev);
    }

    #[test]
    fn topic_tips() {
        let line = r#"{"id":"k1","text":"长城有多长？","category":"knowledge","question_type":"how"}"#;
        let pool = OpeningPool::parse_jsonl(line).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(pool.topic_tip(&mut rng).id, "k1");
        assert_eq!(OpeningPool::parse_jsonl("\n"), Err(OpeningPoolError::Empty));
        assert!(matches!(
            OpeningPool::parse_jsonl("{}"),
            Err(OpeningPoolError::Parse { line: 1, .. })
        ));
    }
}
