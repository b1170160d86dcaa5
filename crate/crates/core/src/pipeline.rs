//! One dialogue turn: query generation, web search, knowledge-grounded
//! response.
//!
//! `Full` issues exactly two generation calls (query, response). The
//! `PreClassifier` ablation asks the model for a need-knowledge verdict first
//! and skips query generation and search when the verdict is below the
//! threshold. `NoKnowledge` answers from the dialogue alone.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, BackendFailure, Backends, GenerationRequest, Stage};
use crate::prompts::{PromptBuilder, PromptError, PromptTemplate};
use crate::types::{DialogueHistory, KnowledgePool, KnowledgeSnippet, Utterance, WebQuery};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    #[default]
    Full,
    PreClassifier,
    NoKnowledge,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid dialogue history: {0}")]
    InvalidHistory(String),
    #[error("generation failed at {stage}: {source}")]
    GenerationFailed {
        stage: Stage,
        #[source]
        source: BackendError,
    },
}

impl PipelineError {
    fn at(stage: Stage, failure: BackendFailure) -> Self {
        PipelineError::GenerationFailed {
            stage,
            source: BackendError { stage, failure },
        }
    }

    pub fn stage(&self) -> Option<Stage> {
        match self {
            PipelineError::InvalidHistory(_) => None,
            PipelineError::GenerationFailed { stage, .. } => Some(*stage),
        }
    }
}

impl From<PromptError> for PipelineError {
    fn from(err: PromptError) -> Self {
        PipelineError::InvalidHistory(err.to_string())
    }
}

/// Monotonic time source for stage accounting.
pub trait Clock: Send + Sync {
    fn now(&self) -> Duration;
}

/// Tokio's clock, so paused-time tests get exact, reproducible timings.
#[derive(Debug, Clone, Copy)]
pub struct TokioClock {
    origin: tokio::time::Instant,
}

impl Default for TokioClock {
    fn default() -> Self {
        Self {
            origin: tokio::time::Instant::now(),
        }
    }
}

impl Clock for TokioClock {
    fn now(&self) -> Duration {
        tokio::time::Instant::now().saturating_duration_since(self.origin)
    }
}

/// Always reads zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct FrozenClock;

impl Clock for FrozenClock {
    fn now(&self) -> Duration {
        Duration::ZERO
    }
}

/// Stages reported in every transcript, in this order.
pub const TIMED_STAGES: [Stage; 4] = [
    Stage::KnowledgeClass,
    Stage::QueryGen,
    Stage::Search,
    Stage::Response,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub elapsed_us: u64,
    pub present: bool,
}

impl StageTiming {
    pub fn elapsed_ms(&self) -> f64 {
        self.elapsed_us as f64 / 1000.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssuedPrompt {
    pub stage: Stage,
    pub prompt: PromptTemplate,
}

/// Everything one turn did, in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnTranscript {
    pub mode: PipelineMode,
    pub history_in: DialogueHistory,
    pub prompts: Vec<IssuedPrompt>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<WebQuery>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search_error: Option<String>,
    pub pool: KnowledgePool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge_scores: Option<Vec<f64>>,
    #[serde(default)]
    pub retried: bool,
    pub response: Utterance,
    pub timings: Vec<StageTiming>,
    pub overall_us: u64,
}

impl TurnTranscript {
    pub fn timing(&self, stage: Stage) -> Option<&StageTiming> {
        self.timings.iter().find(|t| t.stage == stage)
    }

    pub fn overall_ms(&self) -> f64 {
        self.overall_us as f64 / 1000.0
    }

    /// Number of generation requests this turn issued.
    pub fn generation_calls(&self) -> usize {
        self.prompts.len()
    }

    /// Highest classifier score over the pool, if the backend reported any.
    pub fn max_knowledge_score(&self) -> Option<f64> {
        self.knowledge_scores
            .as_ref()
            .and_then(|s| s.iter().copied().reduce(f64::max))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PipelineConfig {
    /// Snippets per response prompt (`m`).
    pub pool_size: usize,
    /// Need-knowledge verdicts and knowledge scores at or above this count
    /// as positive.
    pub classifier_threshold: f64,
    pub query_max_tokens: u32,
    pub response_max_tokens: u32,
    /// Retry the response once with the next-ranked snippets when every
    /// knowledge score is below the threshold.
    pub iterative_injection: bool,
    pub prompts: PromptBuilder,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            pool_size: KnowledgePool::DEPLOYMENT_SIZE,
            classifier_threshold: 0.5,
            query_max_tokens: 32,
            response_max_tokens: 128,
            iterative_injection: false,
            prompts: PromptBuilder::default(),
        }
    }
}

#[derive(Clone)]
pub struct Pipeline {
    backends: Backends,
    config: PipelineConfig,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("backends", &self.backends)
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

struct Stopwatch<'a> {
    clock: &'a dyn Clock,
    elapsed: BTreeMap<Stage, Duration>,
}

impl<'a> Stopwatch<'a> {
    async fn time<T, F>(&mut self, stage: Stage, fut: F) -> T
    where
        F: std::future::Future<Output = T>,
    {
        let start = self.clock.now();
        let out = fut.await;
        let spent = self.clock.now().saturating_sub(start);
        *self.elapsed.entry(stage).or_default() += spent;
        out
    }

    fn timings(&self) -> Vec<StageTiming> {
        TIMED_STAGES
            .iter()
            .map(|stage| match self.elapsed.get(stage) {
                Some(d) => StageTiming {
                    stage: *stage,
                    elapsed_us: d.as_micros() as u64,
                    present: true,
                },
                None => StageTiming {
                    stage: *stage,
                    elapsed_us: 0,
                    present: false,
                },
            })
            .collect()
    }
}

impl Pipeline {
    pub fn new(backends: Backends) -> Self {
        Self {
            backends,
            config: PipelineConfig::default(),
            clock: Arc::new(TokioClock::default()),
        }
    }

    pub fn with_config(mut self, config: PipelineConfig) -> Self {
        assert!(config.pool_size >= 1, "pool size must be at least 1");
        self.config = config;
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn backends(&self) -> &Backends {
        &self.backends
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    async fn call(
        &self,
        stage: Stage,
        prompt: &PromptTemplate,
        max_new_tokens: u32,
        want_scores: bool,
        issued: &mut Vec<IssuedPrompt>,
    ) -> Result<crate::backends::GenerationResult, PipelineError> {
        let mut request = GenerationRequest::new(prompt.rendered.clone(), max_new_tokens);
        request.want_knowledge_scores = want_scores;
        issued.push(IssuedPrompt {
            stage,
            prompt: prompt.clone(),
        });
        self.backends
            .generate(stage, &request)
            .await
            .map_err(|source| PipelineError::GenerationFailed { stage, source })
    }

    /// Runs one turn for `history`, which must end with the user's utterance.
    pub async fn run_turn(
        &self,
        history: &DialogueHistory,
        mode: PipelineMode,
    ) -> Result<TurnTranscript, PipelineError> {
        if history.is_empty() {
            return Err(PipelineError::InvalidHistory("history is empty".into()));
        }
        if !history.ends_with_user() {
            return Err(PipelineError::InvalidHistory(
                "history must end with a user utterance".into(),
            ));
        }
        let cfg = &self.config;
        let started = self.clock.now();
        let mut watch = Stopwatch {
            clock: self.clock.as_ref(),
            elapsed: BTreeMap::new(),
        };
        let mut issued = Vec::new();
        let mut verdict = None;

        let wants_knowledge = match mode {
            PipelineMode::Full => true,
            PipelineMode::NoKnowledge => false,
            PipelineMode::PreClassifier => {
                let prompt = cfg.prompts.response(history)?;
                let result = watch
                    .time(
                        Stage::KnowledgeClass,
                        self.call(Stage::KnowledgeClass, &prompt, 1, true, &mut issued),
                    )
                    .await?;
                let score = result
                    .knowledge_scores
                    .as_ref()
                    .and_then(|s| s.first().copied())
                    .ok_or_else(|| {
                        PipelineError::at(
                            Stage::KnowledgeClass,
                            BackendFailure::MalformedResponse("no need-knowledge verdict".into()),
                        )
                    })?;
                verdict = Some(score);
                score >= cfg.classifier_threshold
            }
        };

        let mut query = None;
        let mut search_error = None;
        let mut pool = KnowledgePool::empty();
        let mut reserve: Vec<KnowledgeSnippet> = Vec::new();
        let mut knowledge_scores = None;
        let mut retried = false;

        let response_text = if wants_knowledge {
            let prompt = cfg.prompts.query(history)?;
            let generated = watch
                .time(
                    Stage::QueryGen,
                    self.call(Stage::QueryGen, &prompt, cfg.query_max_tokens, false, &mut issued),
                )
                .await?;
            let q = WebQuery::new(generated.text.trim()).map_err(|_| {
                PipelineError::at(
                    Stage::QueryGen,
                    BackendFailure::MalformedResponse("generated query is empty".into()),
                )
            })?;

            let top_k = if cfg.iterative_injection {
                cfg.pool_size * 2
            } else {
                cfg.pool_size
            };
            match watch
                .time(Stage::Search, self.backends.search(&q, top_k))
                .await
            {
                Ok(found) => {
                    let mut snippets = found.snippets;
                    reserve = snippets.split_off(snippets.len().min(cfg.pool_size));
                    pool = KnowledgePool::new(snippets);
                }
                // Search failures degrade to answering without knowledge.
                Err(err) => search_error = Some(err.to_string()),
            }
            query = Some(q);

            let (text, scores) = self.knowledge_response(history, &pool, &mut watch, &mut issued).await?;
            knowledge_scores = scores;

            let all_low = knowledge_scores
                .as_ref()
                .is_some_and(|s| s.iter().all(|v| *v < cfg.classifier_threshold));
            if cfg.iterative_injection && all_low && !reserve.is_empty() {
                reserve.truncate(cfg.pool_size);
                pool = KnowledgePool::new(std::mem::take(&mut reserve));
                let (text, scores) =
                    self.knowledge_response(history, &pool, &mut watch, &mut issued).await?;
                knowledge_scores = scores;
                retried = true;
                text
            } else {
                text
            }
        } else {
            let prompt = cfg.prompts.response(history)?;
            watch
                .time(
                    Stage::Response,
                    self.call(Stage::Response, &prompt, cfg.response_max_tokens, false, &mut issued),
                )
                .await?
                .text
        };

        let response = Utterance::system(response_text.trim()).map_err(|_| {
            PipelineError::at(
                Stage::Response,
                BackendFailure::MalformedResponse("generated response is empty".into()),
            )
        })?;
        let overall = self.clock.now().saturating_sub(started);

        Ok(TurnTranscript {
            mode,
            history_in: history.clone(),
            prompts: issued,
            verdict,
            query,
            search_error,
            pool,
            knowledge_scores,
            retried,
            response,
            timings: watch.timings(),
            overall_us: overall.as_micros() as u64,
        })
    }

    async fn knowledge_response(
        &self,
        history: &DialogueHistory,
        pool: &KnowledgePool,
        watch: &mut Stopwatch<'_>,
        issued: &mut Vec<IssuedPrompt>,
    ) -> Result<(String, Option<Vec<f64>>), PipelineError> {
        let cfg = &self.config;
        let prompt = cfg.prompts.knowledge(pool, history)?;
        let want_scores = !pool.is_empty();
        let result = watch
            .time(
                Stage::Response,
                self.call(Stage::Response, &prompt, cfg.response_max_tokens, want_scores, issued),
            )
            .await?;
        let scores = if want_scores { result.knowledge_scores } else { None };
        if let Some(scores) = &scores {
            if scores.len() != pool.m() {
                return Err(PipelineError::at(
                    Stage::Response,
                    BackendFailure::MalformedResponse(format!(
                        "{} knowledge scores for a pool of {}",
                        scores.len(),
                        pool.m()
                    )),
                ));
            }
        }
        Ok((result.text, scores))
    }
}
