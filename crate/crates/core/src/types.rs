//! Dialogue domain model: utterances, alternating histories, knowledge pools
//! and web queries.
//!
//! All values validate their invariants on construction and on
//! deserialization, so anything holding a [`DialogueHistory`] can rely on
//! strict User/System alternation.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenize::TokenSequence;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TypeError {
    #[error("utterance text is empty")]
    EmptyUtterance,
    #[error("utterance {index} must be spoken by {expected}")]
    AlternationViolated { index: usize, expected: Speaker },
    #[error("web query is empty")]
    EmptyQuery,
    #[error("classifier score {0} is outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("knowledge label must be 0 or 1, got {0}")]
    InvalidLabel(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

impl Speaker {
    pub fn other(self) -> Speaker {
        match self {
            Speaker::User => Speaker::System,
            Speaker::System => Speaker::User,
        }
    }
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Speaker::User => f.write_str("user"),
            Speaker::System => f.write_str("system"),
        }
    }
}

/// One turn of talk. Text is never blank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "UtteranceRepr")]
pub struct Utterance {
    speaker: Speaker,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tokens: Option<TokenSequence>,
}

#[derive(Deserialize)]
struct UtteranceRepr {
    speaker: Speaker,
    text: String,
    #[serde(default)]
    tokens: Option<TokenSequence>,
}

impl TryFrom<UtteranceRepr> for Utterance {
    type Error = TypeError;

    fn try_from(repr: UtteranceRepr) -> Result<Self, Self::Error> {
        let mut utterance = Utterance::new(repr.speaker, repr.text)?;
        utterance.tokens = repr.tokens;
        Ok(utterance)
    }
}

impl Utterance {
    pub fn new(speaker: Speaker, text: impl Into<String>) -> Result<Self, TypeError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(TypeError::EmptyUtterance);
        }
        Ok(Self {
            speaker,
            text,
            tokens: None,
        })
    }

    pub fn user(text: impl Into<String>) -> Result<Self, TypeError> {
        Self::new(Speaker::User, text)
    }

    pub fn system(text: impl Into<String>) -> Result<Self, TypeError> {
        Self::new(Speaker::System, text)
    }

    pub fn with_tokens(mut self, tokens: TokenSequence) -> Self {
        self.tokens = Some(tokens);
        self
    }

    pub fn speaker(&self) -> Speaker {
        self.speaker
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn tokens(&self) -> Option<&TokenSequence> {
        self.tokens.as_ref()
    }

    /// Same text, opposite speaker.
    pub fn relabeled(&self) -> Utterance {
        Utterance {
            speaker: self.speaker.other(),
            text: self.text.clone(),
            tokens: self.tokens.clone(),
        }
    }
}

/// Ordered utterances `U_1, S_1, ..., U_t`, strictly alternating and always
/// starting with the user.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Utterance>", into = "Vec<Utterance>")]
pub struct DialogueHistory {
    utterances: Vec<Utterance>,
}

impl TryFrom<Vec<Utterance>> for DialogueHistory {
    type Error = TypeError;

    fn try_from(utterances: Vec<Utterance>) -> Result<Self, Self::Error> {
        DialogueHistory::from_utterances(utterances)
    }
}

impl From<DialogueHistory> for Vec<Utterance> {
    fn from(history: DialogueHistory) -> Self {
        history.utterances
    }
}

impl DialogueHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_utterances(utterances: Vec<Utterance>) -> Result<Self, TypeError> {
        let mut history = Self::new();
        for utterance in utterances {
            history.push(utterance)?;
        }
        Ok(history)
    }

    /// Builds a history from raw texts, assigning User, System, User, ...
    pub fn from_texts<I, S>(texts: I) -> Result<Self, TypeError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut history = Self::new();
        for text in texts {
            let speaker = history.next_speaker();
            history.push(Utterance::new(speaker, text)?)?;
        }
        Ok(history)
    }

    /// Speaker that must produce the next utterance.
    pub fn next_speaker(&self) -> Speaker {
        match self.utterances.last() {
            None => Speaker::User,
            Some(last) => last.speaker().other(),
        }
    }

    /// Appends an utterance, rejecting it if alternation would break.
    pub fn push(&mut self, utterance: Utterance) -> Result<(), TypeError> {
        let expected = self.next_speaker();
        if utterance.speaker() != expected {
            return Err(TypeError::AlternationViolated {
                index: self.utterances.len(),
                expected,
            });
        }
        self.utterances.push(utterance);
        Ok(())
    }

    /// `D_t = D_{t-1} ∪ {R_{t-1}, U_t}`.
    pub fn extended(&self, response: Utterance, next_user: Utterance) -> Result<Self, TypeError> {
        let mut next = self.clone();
        next.push(response)?;
        next.push(next_user)?;
        Ok(next)
    }

    /// Removes the oldest `U, S` pair. Returns `None` when fewer than three
    /// utterances remain, since the current user turn is never dropped.
    pub fn without_oldest_pair(&self) -> Option<Self> {
        if self.utterances.len() < 3 {
            return None;
        }
        Some(Self {
            utterances: self.utterances[2..].to_vec(),
        })
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.utterances.iter().map(Utterance::text)
    }

    pub fn last(&self) -> Option<&Utterance> {
        self.utterances.last()
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn ends_with_user(&self) -> bool {
        matches!(self.last(), Some(u) if u.speaker() == Speaker::User)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeSource {
    Benchmark,
    QaDocument,
    EntityDescription,
    WebSearch,
}

/// Binary usefulness label `l_i`, serialized as `0` / `1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    Unhelpful,
    Helpful,
}

impl TryFrom<u8> for Label {
    type Error = TypeError;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        match value {
            0 => Ok(Label::Unhelpful),
            1 => Ok(Label::Helpful),
            other => Err(TypeError::InvalidLabel(other)),
        }
    }
}

impl From<Label> for u8 {
    fn from(label: Label) -> u8 {
        match label {
            Label::Unhelpful => 0,
            Label::Helpful => 1,
        }
    }
}

impl Label {
    pub fn as_f64(self) -> f64 {
        u8::from(self) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SnippetRepr")]
pub struct KnowledgeSnippet {
    pub text: String,
    pub source: KnowledgeSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    classifier_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

#[derive(Deserialize)]
struct SnippetRepr {
    text: String,
    source: KnowledgeSource,
    #[serde(default)]
    label: Option<Label>,
    #[serde(default)]
    classifier_score: Option<f64>,
    #[serde(default)]
    provenance: Option<String>,
}

impl TryFrom<SnippetRepr> for KnowledgeSnippet {
    type Error = TypeError;

    fn try_from(repr: SnippetRepr) -> Result<Self, Self::Error> {
        let snippet = KnowledgeSnippet {
            text: repr.text,
            source: repr.source,
            label: repr.label,
            classifier_score: None,
            provenance: repr.provenance,
        };
        match repr.classifier_score {
            Some(score) => snippet.with_score(score),
            None => Ok(snippet),
        }
    }
}

impl KnowledgeSnippet {
    pub fn new(text: impl Into<String>, source: KnowledgeSource) -> Self {
        Self {
            text: text.into(),
            source,
            label: None,
            classifier_score: None,
            provenance: None,
        }
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.label = Some(label);
        self
    }

    pub fn with_provenance(mut self, provenance: impl Into<String>) -> Self {
        self.provenance = Some(provenance.into());
        self
    }

    pub fn with_score(mut self, score: f64) -> Result<Self, TypeError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(TypeError::ScoreOutOfRange(score));
        }
        self.classifier_score = Some(score);
        Ok(self)
    }

    pub fn classifier_score(&self) -> Option<f64> {
        self.classifier_score
    }
}

/// The `m` snippets `K = {k_i}` supplied to one response.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KnowledgePool {
    snippets: Vec<KnowledgeSnippet>,
}

impl KnowledgePool {
    /// Deployment keeps only the top search result.
    pub const DEPLOYMENT_SIZE: usize = 1;

    pub fn new(snippets: Vec<KnowledgeSnippet>) -> Self {
        Self { snippets }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn m(&self) -> usize {
        self.snippets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snippets.is_empty()
    }

    pub fn snippets(&self) -> &[KnowledgeSnippet] {
        &self.snippets
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.snippets.iter().map(|s| s.text.as_str())
    }

    pub fn push(&mut self, snippet: KnowledgeSnippet) {
        self.snippets.push(snippet);
    }

    pub fn into_snippets(self) -> Vec<KnowledgeSnippet> {
        self.snippets
    }
}

/// Search query `Q_t`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct WebQuery(String);

impl WebQuery {
    pub fn new(text: impl Into<String>) -> Result<Self, TypeError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(TypeError::EmptyQuery);
        }
        Ok(Self(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for WebQuery {
    type Error = TypeError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        WebQuery::new(value)
    }
}

impl From<WebQuery> for String {
    fn from(query: WebQuery) -> String {
        query.0
    }
}

impl fmt::Display for WebQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}
