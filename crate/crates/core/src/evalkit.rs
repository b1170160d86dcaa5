//! Offline evaluation: self-chat, human-score aggregation, benchmark scoring
//! and dataset statistics.

use std::collections::{BTreeMap, HashMap};

use futures::stream::{self, StreamExt, TryStreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arena::QuestionType;
use crate::metrics::{
    corpus_mean, evaluate_pair, similarity_histogram, MetricConfig, MetricError, MetricReport,
    SimilarityHistogram,
};
use crate::pipeline::{Pipeline, PipelineError, PipelineMode, TurnTranscript};
use crate::types::{DialogueHistory, Speaker, Utterance};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("self-chat needs at least one turn")]
    InvalidTurns,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error(transparent)]
    Generation(#[from] PipelineError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Utterance,
    Session,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HumanMetric {
    Coherence,
    Informativeness,
    Safety,
    Inspiration,
    Hallucination,
    Engagingness,
    Faithfulness,
    Knowledgeability,
}

impl HumanMetric {
    pub const ALL: [HumanMetric; 8] = [
        HumanMetric::Coherence,
        HumanMetric::Informativeness,
        HumanMetric::Safety,
        HumanMetric::Inspiration,
        HumanMetric::Hallucination,
        HumanMetric::Engagingness,
        HumanMetric::Faithfulness,
        HumanMetric::Knowledgeability,
    ];

    pub fn max_value(self) -> i64 {
        match self {
            HumanMetric::Hallucination | HumanMetric::Knowledgeability => 1,
            _ => 2,
        }
    }

    pub fn allowed_at(self, level: Level) -> bool {
        match self {
            HumanMetric::Engagingness | HumanMetric::Faithfulness => level == Level::Session,
            HumanMetric::Knowledgeability => level == Level::Utterance,
            _ => true,
        }
    }

    /// Hallucination counts errors, so smaller is better.
    pub fn lower_is_better(self) -> bool {
        self == HumanMetric::Hallucination
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanScoreRecord {
    pub dialogue_id: String,
    pub level: Level,
    pub metric: HumanMetric,
    pub value: i64,
    pub annotator_id: String,
}

impl HumanScoreRecord {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !self.metric.allowed_at(self.level) {
            return Err(EvalError::SchemaViolation(format!(
                "{:?} is not scored at {:?} level",
                self.metric, self.level
            )));
        }
        if !(0..=self.metric.max_value()).contains(&self.value) {
            return Err(EvalError::SchemaViolation(format!(
                "{:?} value {} outside 0..={}",
                self.metric,
                self.value,
                self.metric.max_value()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricAggregate {
    pub level: Level,
    pub metric: HumanMetric,
    pub mean: f64,
    pub dialogues: usize,
    pub records: usize,
    pub lower_is_better: bool,
}

/// Mean per `(level, metric)`: first across annotators within a dialogue,
/// then across dialogues. Output is sorted by level then metric.
pub fn aggregate_annotations(records: &[HumanScoreRecord]) -> Result<Vec<MetricAggregate>, EvalError> {
    // (sum, count) per dialogue within each group.
    type PerDialogue<'a> = BTreeMap<&'a str, (i64, usize)>;
    let mut groups: BTreeMap<(Level, HumanMetric), PerDialogue> = BTreeMap::new();
    for record in records {
        record.validate()?;
        let cell = groups
            .entry((record.level, record.metric))
            .or_default()
            .entry(record.dialogue_id.as_str())
            .or_default();
        cell.0 += record.value;
        cell.1 += 1;
    }
    Ok(groups
        .into_iter()
        .map(|((level, metric), dialogues)| {
            let records = dialogues.values().map(|(_, n)| n).sum();
            let mean = dialogues
                .values()
                .map(|(sum, n)| *sum as f64 / *n as f64)
                .sum::<f64>()
                / dialogues.len() as f64;
            MetricAggregate {
                level,
                metric,
                mean,
                dialogues: dialogues.len(),
                records,
                lower_is_better: metric.lower_is_better(),
            }
        })
        .collect())
}

pub fn parse_human_scores(text: &str) -> Result<Vec<HumanScoreRecord>, EvalError> {
    parse_jsonl(text)
}

fn parse_jsonl<T: serde::de::DeserializeOwned>(text: &str) -> Result<Vec<T>, EvalError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| EvalError::Parse {
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfChatLog {
    pub dialogue: DialogueHistory,
    pub transcripts: Vec<TurnTranscript>,
}

/// Swaps speakers so the side about to speak sees itself as System. The
/// swapped history would start with System, so its first utterance is
/// dropped.
fn speaker_view(dialogue: &DialogueHistory) -> DialogueHistory {
    if dialogue.next_speaker() == Speaker::System {
        return dialogue.clone();
    }
    let swapped: Vec<Utterance> = dialogue.utterances()[1..]
        .iter()
        .map(Utterance::relabeled)
        .collect();
    DialogueHistory::from_utterances(swapped).expect("relabeling keeps alternation")
}

/// Lets `bot` talk to itself from `opening` until the dialogue has
/// `2 * turns` utterances.
pub async fn self_chat(
    opening: &str,
    bot: &Pipeline,
    mode: PipelineMode,
    turns: usize,
) -> Result<SelfChatLog, EvalError> {
    if turns == 0 {
        return Err(EvalError::InvalidTurns);
    }
    let opening = Utterance::user(opening.trim())
        .map_err(|e| EvalError::SchemaViolation(e.to_string()))?;
    let mut dialogue = DialogueHistory::from_utterances(vec![opening]).expect("single user turn");
    let mut transcripts = Vec::with_capacity(2 * turns - 1);
    while dialogue.len() < 2 * turns {
        let view = speaker_view(&dialogue);
        let transcript = bot.run_turn(&view, mode).await?;
        let speaker = dialogue.next_speaker();
        let utterance = Utterance::new(speaker, transcript.response.text())
            .expect("pipeline responses are non-empty");
        dialogue.push(utterance).expect("speaker follows alternation");
        transcripts.push(transcript);
    }
    Ok(SelfChatLog {
        dialogue,
        transcripts,
    })
}

/// One benchmark line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub history: Vec<String>,
    pub reference: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_knowledge: Option<String>,
    pub question_type: QuestionType,
    #[serde(default)]
    pub ellipsis_coref: bool,
    /// Lines sharing a session id belong to one dialogue; without it every
    /// line is its own session.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkExample {
    pub history: DialogueHistory,
    pub reference: Utterance,
    pub gold_query: Option<String>,
    pub gold_knowledge: Option<String>,
    pub question_type: QuestionType,
    pub has_ellipsis_or_coref: bool,
}

impl BenchmarkRecord {
    /// Speakers are assigned backwards from the reference, which is always
    /// System. An even-length history would open with a System utterance,
    /// which is dropped.
    pub fn to_example(&self) -> Result<BenchmarkExample, EvalError> {
        let skip = self.history.len().is_multiple_of(2) && !self.history.is_empty();
        let skip = usize::from(skip);
        let history = DialogueHistory::from_texts(self.history[skip..].iter().cloned())
            .map_err(|e| EvalError::SchemaViolation(e.to_string()))?;
        if history.is_empty() {
            return Err(EvalError::SchemaViolation("history has no user turn".into()));
        }
        let reference = Utterance::system(self.reference.clone())
            .map_err(|e| EvalError::SchemaViolation(e.to_string()))?;
        Ok(BenchmarkExample {
            history,
            reference,
            gold_query: self.gold_query.clone().filter(|q| !q.trim().is_empty()),
            gold_knowledge: self.gold_knowledge.clone().filter(|k| !k.trim().is_empty()),
            question_type: self.question_type,
            has_ellipsis_or_coref: self.ellipsis_coref,
        })
    }
}

pub fn parse_benchmark(text: &str) -> Result<Vec<BenchmarkRecord>, EvalError> {
    parse_jsonl(text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub examples: usize,
    pub sessions: usize,
    pub utterances: usize,
    pub avg_utterances_per_session: f64,
    pub question_types: BTreeMap<QuestionType, usize>,
    pub ellipsis_coref: usize,
}

/// A session's utterance count is the longest `history + reference` among
/// its lines.
pub fn dataset_stats(records: &[BenchmarkRecord]) -> Result<DatasetStats, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let mut sessions: HashMap<String, usize> = HashMap::new();
    let mut question_types = BTreeMap::new();
    let mut ellipsis_coref = 0;
    for (i, record) in records.iter().enumerate() {
        let key = record
            .session_id
            .clone()
            .unwrap_or_else(|| format!("\u{0}line-{i}"));
        let length = sessions.entry(key).or_default();
        *length = (*length).max(record.history.len() + 1);
        *question_types.entry(record.question_type).or_default() += 1;
        ellipsis_coref += usize::from(record.ellipsis_coref);
    }
    let utterances: usize = sessions.values().sum();
    Ok(DatasetStats {
        examples: records.len(),
        sessions: sessions.len(),
        utterances,
        avg_utterances_per_session: utterances as f64 / sessions.len() as f64,
        question_types,
        ellipsis_coref,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub index: usize,
    pub candidate: String,
    pub report: MetricReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieved: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub examples: usize,
    pub corpus: MetricReport,
    pub per_example: Vec<ExampleScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_similarity: Option<SimilarityHistogram>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge_similarity: Option<SimilarityHistogram>,
}

#[derive(Debug, Clone)]
pub struct BenchmarkOptions {
    pub metrics: MetricConfig,
    pub mode: PipelineMode,
    pub concurrency: usize,
    pub bin_edges: Vec<f64>,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        Self {
            metrics: MetricConfig::default(),
            mode: PipelineMode::Full,
            concurrency: 16,
            bin_edges: crate::metrics::default_bin_edges(),
        }
    }
}

/// Answers every example with `bot` and scores it against the reference.
///
/// Generated queries and the top retrieved snippet are also compared with the
/// gold query and gold knowledge where both sides exist.
pub async fn evaluate_benchmark(
    examples: &[BenchmarkExample],
    bot: &Pipeline,
    options: &BenchmarkOptions,
) -> Result<BenchmarkReport, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let backends = bot.backends();
    let per_example: Vec<ExampleScore> = stream::iter(examples.iter().enumerate())
        .map(|(index, example)| async move {
            let transcript = bot.run_turn(&example.history, options.mode).await?;
            let candidate = transcript.response.text().to_owned();
            let retrieved = transcript.pool.texts().next().map(str::to_owned);
            let report = evaluate_pair(
                &candidate,
                example.reference.text(),
                &options.metrics,
                backends,
            )
            .await?;
            Ok::<_, EvalError>(ExampleScore {
                index,
                candidate,
                report,
                query: transcript.query.map(String::from),
                retrieved,
            })
        })
        .buffered(options.concurrency.max(1))
        .try_collect()
        .await?;

    let reports: Vec<MetricReport> = per_example.iter().map(|s| s.report).collect();
    let corpus = corpus_mean(&reports)?;

    let pairs = |pick: fn(&ExampleScore, &BenchmarkExample) -> Option<(String, String)>| {
        per_example
            .iter()
            .zip(examples)
            .filter_map(|(s, e)| pick(s, e))
            .collect::<Vec<_>>()
    };
    let query_pairs = pairs(|s, e| Some((s.query.clone()?, e.gold_query.clone()?)));
    let knowledge_pairs = pairs(|s, e| Some((s.retrieved.clone()?, e.gold_knowledge.clone()?)));
    let histogram = |pairs: Vec<(String, String)>| async move {
        if pairs.is_empty() {
            Ok::<_, EvalError>(None)
        } else {
            Ok(Some(similarity_histogram(&pairs, backends, &options.bin_edges).await?))
        }
    };
    let query_similarity = histogram(query_pairs).await?;
    let knowledge_similarity = histogram(knowledge_pairs).await?;

    Ok(BenchmarkReport {
        examples: examples.len(),
        corpus,
        per_example,
        query_similarity,
        knowledge_similarity,
    })
}
