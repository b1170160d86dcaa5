//! Training data for the knowledge-aware response model: instance
//! construction from three record kinds, low-confidence entity negatives, the
//! two training losses and classifier-based bootstrap filtering.
//!
//! Both losses are reported as quantities to minimize: the response term is a
//! negative log-likelihood and the knowledge term a binary cross entropy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::TurnTranscript;
use crate::prompts::render_knowledge;
use crate::types::{
    DialogueHistory, KnowledgePool, KnowledgeSnippet, KnowledgeSource, Label, Speaker, Utterance,
};

pub const DEFAULT_NEGATIVE_THRESHOLD: f64 = 0.5;
pub const DEFAULT_BOOTSTRAP_THRESHOLD: f64 = 0.5;
pub const DEFAULT_LAMBDA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("line {line}: {reason}")]
    SchemaViolation { line: usize, reason: String },
    #[error("threshold {0} is outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("confidence {0} is outside [0, 1]")]
    InvalidConfidence(f64),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("log-probability at {index} is positive: {value}")]
    PositiveLogProb { index: usize, value: f64 },
    #[error("{labels} labels but {scores} scores")]
    LengthMismatch { labels: usize, scores: usize },
    #[error("score at {index} is not strictly inside (0, 1): {value}")]
    DegenerateScore { index: usize, value: f64 },
    #[error("loss inputs must be finite")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceSource {
    KnowledgeDialogue,
    Qa,
    OnlineService,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuildMode {
    Kdialog,
    Qa,
    Service,
}

impl std::str::FromStr for BuildMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "kdialog" => Ok(BuildMode::Kdialog),
            "qa" => Ok(BuildMode::Qa),
            "service" => Ok(BuildMode::Service),
            other => Err(format!("unknown mode {other:?}; expected kdialog, qa or service")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "InstanceRepr")]
pub struct TrainingInstance {
    history: DialogueHistory,
    response: Utterance,
    pool: KnowledgePool,
    labels: Vec<Label>,
    source: InstanceSource,
}

#[derive(Deserialize)]
struct InstanceRepr {
    history: DialogueHistory,
    response: Utterance,
    pool: KnowledgePool,
    labels: Vec<Label>,
    source: InstanceSource,
}

impl TryFrom<InstanceRepr> for TrainingInstance {
    type Error = String;

    fn try_from(r: InstanceRepr) -> Result<Self, Self::Error> {
        TrainingInstance::new(r.history, r.response, r.pool, r.labels, r.source)
    }
}

impl TrainingInstance {
    /// Snippet labels are overwritten with `labels`.
    pub fn new(
        history: DialogueHistory,
        response: Utterance,
        pool: KnowledgePool,
        labels: Vec<Label>,
        source: InstanceSource,
    ) -> Result<Self, String> {
        if labels.len() != pool.m() {
            return Err(format!("{} labels for {} snippets", labels.len(), pool.m()));
        }
        if !history.ends_with_user() {
            return Err("history must end with a user utterance".into());
        }
        if response.speaker() != Speaker::System {
            return Err("response must be a system utterance".into());
        }
        let pool = KnowledgePool::new(
            pool.into_snippets()
                .into_iter()
                .zip(&labels)
                .map(|(s, l)| s.with_label(*l))
                .collect(),
        );
        Ok(Self {
            history,
            response,
            pool,
            labels,
            source,
        })
    }

    pub fn history(&self) -> &DialogueHistory {
        &self.history
    }

    pub fn response(&self) -> &Utterance {
        &self.response
    }

    pub fn pool(&self) -> &KnowledgePool {
        &self.pool
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn source(&self) -> InstanceSource {
        self.source
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|l| **l == Label::Helpful).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KnowledgeItem {
    Text(String),
    Labeled { text: String, label: Label },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeDialogueRecord {
    pub history: Vec<String>,
    pub response: Option<String>,
    /// Plain strings are gold knowledge and get label 1.
    #[serde(default)]
    pub knowledge: Vec<KnowledgeItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub question: String,
    pub answer: Option<String>,
    pub document: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityDescription {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity: Option<String>,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceRecord {
    pub history: Vec<String>,
    pub response: Option<String>,
    #[serde(default)]
    pub entities: Vec<EntityDescription>,
}

/// A linked entity with its linking confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityCandidate {
    pub surface: String,
    pub description: String,
    pub confidence: f64,
}

impl EntityCandidate {
    pub fn new(
        surface: impl Into<String>,
        description: impl Into<String>,
        confidence: f64,
    ) -> Result<Self, DataError> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(DataError::InvalidConfidence(confidence));
        }
        Ok(Self {
            surface: surface.into(),
            description: description.into(),
            confidence,
        })
    }
}

fn instance_from(
    line: usize,
    history: &[String],
    response: Option<&str>,
    knowledge: Vec<(KnowledgeSnippet, Label)>,
    source: InstanceSource,
) -> Result<TrainingInstance, DataError> {
    let violation = |reason: String| DataError::SchemaViolation { line, reason };
    let response = response.ok_or_else(|| violation("missing response".into()))?;
    let history = DialogueHistory::from_texts(history.iter().cloned())
        .map_err(|e| violation(e.to_string()))?;
    let response = Utterance::system(response).map_err(|e| violation(e.to_string()))?;
    let (snippets, labels): (Vec<_>, Vec<_>) = knowledge.into_iter().unzip();
    TrainingInstance::new(history, response, KnowledgePool::new(snippets), labels, source)
        .map_err(violation)
}

fn parse_line<T: serde::de::DeserializeOwned>(line: usize, text: &str) -> Result<T, DataError> {
    serde_json::from_str(text).map_err(|e| DataError::SchemaViolation {
        line,
        reason: e.to_string(),
    })
}

/// Builds one instance per non-blank JSON line of `input`.
pub fn build_instances(input: &str, mode: BuildMode) -> Result<Vec<TrainingInstance>, DataError> {
    input
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, text)| {
            let line = i + 1;
            match mode {
                BuildMode::Kdialog => {
                    let r: KnowledgeDialogueRecord = parse_line(line, text)?;
                    let knowledge = r
                        .knowledge
                        .into_iter()
                        .map(|k| {
                            let (text, label) = match k {
                                KnowledgeItem::Text(t) => (t, Label::Helpful),
                                KnowledgeItem::Labeled { text, label } => (text, label),
                            };
                            (KnowledgeSnippet::new(text, KnowledgeSource::Benchmark), label)
                        })
                        .collect();
                    instance_from(
                        line,
                        &r.history,
                        r.response.as_deref(),
                        knowledge,
                        InstanceSource::KnowledgeDialogue,
                    )
                }
                BuildMode::Qa => {
                    let r: QaRecord = parse_line(line, text)?;
                    let doc = KnowledgeSnippet::new(r.document, KnowledgeSource::QaDocument);
                    instance_from(
                        line,
                        &[r.question],
                        r.answer.as_deref(),
                        vec![(doc, Label::Helpful)],
                        InstanceSource::Qa,
                    )
                }
                BuildMode::Service => {
                    let r: ServiceRecord = parse_line(line, text)?;
                    let knowledge = r
                        .entities
                        .into_iter()
                        .map(|e| {
                            let mut s =
                                KnowledgeSnippet::new(e.description, KnowledgeSource::EntityDescription);
                            if let Some(entity) = e.entity {
                                s = s.with_provenance(entity);
                            }
                            (s, Label::Helpful)
                        })
                        .collect();
                    instance_from(
                        line,
                        &r.history,
                        r.response.as_deref(),
                        knowledge,
                        InstanceSource::OnlineService,
                    )
                }
            }
        })
        .collect()
}

fn check_threshold(value: f64) -> Result<(), DataError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(DataError::InvalidThreshold(value))
    }
}

/// Appends every candidate with `confidence < tau` as an unhelpful snippet.
/// The pool is reordered stably so that helpful snippets come first.
pub fn inject_negatives(
    instance: &TrainingInstance,
    candidates: &[EntityCandidate],
    tau: f64,
) -> Result<TrainingInstance, DataError> {
    check_threshold(tau)?;
    let existing = instance
        .pool
        .snippets()
        .iter()
        .cloned()
        .zip(instance.labels.iter().copied());
    let injected = candidates.iter().filter(|c| c.confidence < tau).map(|c| {
        (
            KnowledgeSnippet::new(c.description.clone(), KnowledgeSource::EntityDescription)
                .with_provenance(c.surface.clone()),
            Label::Unhelpful,
        )
    });
    let (positives, negatives): (Vec<_>, Vec<_>) =
        existing.chain(injected).partition(|(_, l)| *l == Label::Helpful);
    let (snippets, labels) = positives.into_iter().chain(negatives).unzip();
    Ok(TrainingInstance::new(
        instance.history.clone(),
        instance.response.clone(),
        KnowledgePool::new(snippets),
        labels,
        instance.source,
    )
    .expect("injection keeps the instance well formed"))
}

/// The knowledge-response prompt the model is trained on.
/// Not trimmed to a token budget.
pub fn serialize_training_prompt(instance: &TrainingInstance) -> String {
    render_knowledge(instance.pool.texts(), instance.history.texts())
}

/// Negative log-likelihood of the reference response tokens.
pub fn loss_main(token_logprobs: &[f64]) -> Result<f64, LossError> {
    let mut total = 0.0;
    for (index, value) in token_logprobs.iter().copied().enumerate() {
        if value.is_nan() {
            return Err(LossError::NonFinite);
        }
        if value > 0.0 {
            return Err(LossError::PositiveLogProb { index, value });
        }
        total -= value;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuxLossMode {
    /// `-Σ [l ln s + (1 - l) ln(1 - s)]`.
    #[default]
    FullBce,
    /// `-Σ l ln s`, ignoring unhelpful snippets.
    PositiveOnly,
}

/// Knowledge-classification loss summed over the pool.
pub fn loss_aux(labels: &[Label], scores: &[f64], mode: AuxLossMode) -> Result<f64, LossError> {
    if labels.len() != scores.len() {
        return Err(LossError::LengthMismatch {
            labels: labels.len(),
            scores: scores.len(),
        });
    }
    let mut total = 0.0;
    for (index, (label, score)) in labels.iter().zip(scores).enumerate() {
        if !(*score > 0.0 && *score < 1.0) {
            return Err(LossError::DegenerateScore {
                index,
                value: *score,
            });
        }
        total -= match (label, mode) {
            (Label::Helpful, _) => score.ln(),
            (Label::Unhelpful, AuxLossMode::FullBce) => (-score).ln_1p(),
            (Label::Unhelpful, AuxLossMode::PositiveOnly) => 0.0,
        };
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss_main: f64,
    pub loss_aux: f64,
    pub lambda: f64,
    pub total: f64,
}

/// `total = main + lambda * aux`.
pub fn loss_total(loss_main: f64, loss_aux: f64, lambda: f64) -> Result<LossBreakdown, LossError> {
    if !(loss_main.is_finite() && loss_aux.is_finite() && lambda.is_finite()) {
        return Err(LossError::NonFinite);
    }
    Ok(LossBreakdown {
        loss_main,
        loss_aux,
        lambda,
        total: loss_main + lambda * loss_aux,
    })
}

/// Keeps transcripts whose best knowledge score reaches `threshold`.
/// Transcripts without scores are dropped.
pub fn bootstrap_filter(
    transcripts: &[TurnTranscript],
    threshold: f64,
) -> Result<Vec<TurnTranscript>, DataError> {
    check_threshold(threshold)?;
    Ok(transcripts
        .iter()
        .filter(|t| t.max_knowledge_score().is_some_and(|s| s >= threshold))
        .cloned()
        .collect())
}
