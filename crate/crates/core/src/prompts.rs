//! The three prompt templates used to drive the backbone model.
//!
//! | kind   | rendering                                                  |
//! |--------|------------------------------------------------------------|
//! | `P_q`  | `对话：U_1, S_1, ..., U_t. 此时应该去检索 [sMask]`          |
//! | `P_r`  | `对话：U_1, S_1, ..., U_t, [sMask]`                        |
//! | `P_kr` | `背景：k_1, ..., k_m. 对话：U_1, S_1, ..., U_t, [sMask]`    |
//!
//! Utterances and snippets are joined with `", "` and segments end with
//! `". "`. These separators are reserved: texts containing them still render,
//! but [`parse_prompt`] can no longer recover the original segments.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenize::{tokenize, TokenScheme};
use crate::types::{DialogueHistory, KnowledgePool};

pub const MASK: &str = "[sMask]";
pub const DIALOGUE_LABEL: &str = "对话：";
pub const BACKGROUND_LABEL: &str = "背景：";
pub const SEARCH_CUE: &str = "此时应该去检索";
pub const ITEM_SEPARATOR: &str = ", ";
pub const SEGMENT_TERMINATOR: &str = ". ";

/// Default input budget in tokens; matches the backbone's maximal input length.
pub const DEFAULT_TOKEN_BUDGET: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("dialogue history is empty")]
    EmptyHistory,
    #[error("dialogue history must end with a user utterance")]
    EndsWithSystem,
    #[error("not a recognised prompt: {0}")]
    Unrecognised(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptKind {
    #[serde(rename = "P_q")]
    Query,
    #[serde(rename = "P_r")]
    Response,
    #[serde(rename = "P_kr")]
    KnowledgeResponse,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub kind: PromptKind,
    pub rendered: String,
}

/// Renders prompts while keeping them inside a token budget.
///
/// When a prompt is over budget the oldest complete `U, S` pair is dropped
/// and the prompt re-rendered. The current user utterance is always kept, so
/// a single very long utterance can still exceed the budget.
#[derive(Debug, Clone, Copy)]
pub struct PromptBuilder {
    pub token_budget: usize,
    pub scheme: TokenScheme,
}

impl Default for PromptBuilder {
    fn default() -> Self {
        Self {
            token_budget: DEFAULT_TOKEN_BUDGET,
            scheme: TokenScheme::default(),
        }
    }
}

impl PromptBuilder {
    pub fn with_budget(token_budget: usize) -> Self {
        Self {
            token_budget,
            ..Self::default()
        }
    }

    pub fn query(&self, history: &DialogueHistory) -> Result<PromptTemplate, PromptError> {
        let rendered = self.fit(history, |h| render_query(h.texts()))?;
        Ok(PromptTemplate {
            kind: PromptKind::Query,
            rendered,
        })
    }

    pub fn response(&self, history: &DialogueHistory) -> Result<PromptTemplate, PromptError> {
        let rendered = self.fit(history, |h| render_response(h.texts()))?;
        Ok(PromptTemplate {
            kind: PromptKind::Response,
            rendered,
        })
    }

    pub fn knowledge(
        &self,
        pool: &KnowledgePool,
        history: &DialogueHistory,
    ) -> Result<PromptTemplate, PromptError> {
        let rendered = self.fit(history, |h| render_knowledge(pool.texts(), h.texts()))?;
        Ok(PromptTemplate {
            kind: PromptKind::KnowledgeResponse,
            rendered,
        })
    }

    fn fit<F>(&self, history: &DialogueHistory, render: F) -> Result<String, PromptError>
    where
        F: Fn(&DialogueHistory) -> String,
    {
        check_history(history)?;
        let mut current = history.clone();
        loop {
            let rendered = render(&current);
            if tokenize(&rendered, self.scheme).len() <= self.token_budget {
                return Ok(rendered);
            }
            match current.without_oldest_pair() {
                Some(shorter) => current = shorter,
                None => return Ok(rendered),
            }
        }
    }
}

fn check_history(history: &DialogueHistory) -> Result<(), PromptError> {
    if history.is_empty() {
        Err(PromptError::EmptyHistory)
    } else if !history.ends_with_user() {
        Err(PromptError::EndsWithSystem)
    } else {
        Ok(())
    }
}

pub fn build_query_prompt(history: &DialogueHistory) -> Result<PromptTemplate, PromptError> {
    PromptBuilder::default().query(history)
}

pub fn build_response_prompt(history: &DialogueHistory) -> Result<PromptTemplate, PromptError> {
    PromptBuilder::default().response(history)
}

pub fn build_knowledge_prompt(
    pool: &KnowledgePool,
    history: &DialogueHistory,
) -> Result<PromptTemplate, PromptError> {
    PromptBuilder::default().knowledge(pool, history)
}

fn join<'a>(items: impl IntoIterator<Item = &'a str>) -> String {
    items.into_iter().collect::<Vec<_>>().join(ITEM_SEPARATOR)
}

pub fn render_query<'a>(utterances: impl IntoIterator<Item = &'a str>) -> String {
    format!(
        "{DIALOGUE_LABEL}{}{SEGMENT_TERMINATOR}{SEARCH_CUE} {MASK}",
        join(utterances)
    )
}

pub fn render_response<'a>(utterances: impl IntoIterator<Item = &'a str>) -> String {
    format!("{DIALOGUE_LABEL}{}{ITEM_SEPARATOR}{MASK}", join(utterances))
}

pub fn render_knowledge<'a>(
    snippets: impl IntoIterator<Item = &'a str>,
    utterances: impl IntoIterator<Item = &'a str>,
) -> String {
    format!(
        "{BACKGROUND_LABEL}{}{SEGMENT_TERMINATOR}{}",
        join(snippets),
        render_response(utterances)
    )
}

/// Segments recovered from a rendered prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPrompt {
    pub kind: PromptKind,
    pub knowledge: Vec<String>,
    pub utterances: Vec<String>,
}

fn split_items(segment: &str) -> Vec<String> {
    if segment.is_empty() {
        Vec::new()
    } else {
        segment.split(ITEM_SEPARATOR).map(str::to_owned).collect()
    }
}

/// Inverse of the renderers for texts free of the reserved separators.
pub fn parse_prompt(rendered: &str) -> Result<ParsedPrompt, PromptError> {
    let unrecognised = || PromptError::Unrecognised(rendered.to_owned());
    let response_tail = format!("{ITEM_SEPARATOR}{MASK}");
    let query_tail = format!("{SEGMENT_TERMINATOR}{SEARCH_CUE} {MASK}");

    if let Some(body) = rendered.strip_prefix(BACKGROUND_LABEL) {
        let marker = format!("{SEGMENT_TERMINATOR}{DIALOGUE_LABEL}");
        let (background, dialogue) = body.split_once(&marker).ok_or_else(unrecognised)?;
        let dialogue = dialogue
            .strip_suffix(&response_tail)
            .ok_or_else(unrecognised)?;
        return Ok(ParsedPrompt {
            kind: PromptKind::KnowledgeResponse,
            knowledge: split_items(background),
            utterances: split_items(dialogue),
        });
    }

    let body = rendered
        .strip_prefix(DIALOGUE_LABEL)
        .ok_or_else(unrecognised)?;
    if let Some(dialogue) = body.strip_suffix(&query_tail) {
        Ok(ParsedPrompt {
            kind: PromptKind::Query,
            knowledge: Vec::new(),
            utterances: split_items(dialogue),
        })
    } else if let Some(dialogue) = body.strip_suffix(&response_tail) {
        Ok(ParsedPrompt {
            kind: PromptKind::Response,
            knowledge: Vec::new(),
            utterances: split_items(dialogue),
        })
    } else {
        Err(unrecognised())
    }
}
