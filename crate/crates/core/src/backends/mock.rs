//! Deterministic in-process backends.
//!
//! Every mock is a pure function of its configuration and input, so two runs
//! with the same setup produce byte-identical transcripts.

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    BackendFailure, Embedder, EmbeddingVector, GenerationRequest, GenerationResult, Generator,
    SearchEngine, SearchResult,
};
use crate::prompts::{parse_prompt, PromptKind};
use crate::tokenize::{tokenize, TokenScheme};
use crate::types::{KnowledgeSnippet, KnowledgeSource, WebQuery};

/// Hex SHA-256 of a prompt; the key of a scripted reply table.
pub fn prompt_key(prompt: &str) -> String {
    Sha256::digest(prompt.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Deterministic value in `[0, 1)` derived from the given parts.
fn unit_hash(parts: &[&[u8]]) -> f64 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    let digest = hasher.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    (u64::from_le_bytes(head) >> 11) as f64 / (1u64 << 53) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedReply {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge_scores: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay_ms: Option<u64>,
}

impl ScriptedReply {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            token_logprobs: None,
            knowledge_scores: None,
            delay_ms: None,
        }
    }

    pub fn with_knowledge_scores(mut self, scores: Vec<f64>) -> Self {
        self.knowledge_scores = Some(scores);
        self
    }

    pub fn with_token_logprobs(mut self, logprobs: Vec<f64>) -> Self {
        self.token_logprobs = Some(logprobs);
        self
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay_ms = Some(delay.as_millis() as u64);
        self
    }
}

/// Behaviour for prompts missing from the script.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// Reply with the prompt itself.
    Echo,
    /// Fail with `Unavailable`.
    Fail,
    Fixed(String),
}

/// Generator answering from a table keyed by [`prompt_key`].
///
/// When knowledge scores are requested but not scripted, one pseudo-random
/// score per snippet of a `P_kr` prompt is derived from the prompt hash (or a
/// single score for any other prompt, the need-knowledge verdict slot).
#[derive(Debug)]
pub struct ScriptedGenerator {
    replies: HashMap<String, ScriptedReply>,
    fallback: Fallback,
    default_delay: Duration,
    calls: AtomicUsize,
}

impl ScriptedGenerator {
    pub fn new(fallback: Fallback) -> Self {
        Self {
            replies: HashMap::new(),
            fallback,
            default_delay: Duration::ZERO,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn echo() -> Self {
        Self::new(Fallback::Echo)
    }

    pub fn failing() -> Self {
        Self::new(Fallback::Fail)
    }

    /// Builds from a golden table whose keys are already prompt hashes.
    pub fn from_table(table: HashMap<String, ScriptedReply>, fallback: Fallback) -> Self {
        Self {
            replies: table,
            ..Self::new(fallback)
        }
    }

    pub fn with_reply(mut self, prompt: &str, reply: ScriptedReply) -> Self {
        self.insert(prompt, reply);
        self
    }

    pub fn with_default_delay(mut self, delay: Duration) -> Self {
        self.default_delay = delay;
        self
    }

    pub fn insert(&mut self, prompt: &str, reply: ScriptedReply) {
        self.replies.insert(prompt_key(prompt), reply);
    }

    /// Number of `generate` calls served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn derived_scores(prompt: &str) -> Vec<f64> {
        let slots = match parse_prompt(prompt) {
            Ok(parsed) if parsed.kind == PromptKind::KnowledgeResponse => parsed.knowledge.len(),
            _ => 1,
        };
        (0..slots)
            .map(|i| unit_hash(&[prompt.as_bytes(), b"score", &i.to_le_bytes()]))
            .collect()
    }

    fn derived_logprobs(prompt: &str, text: &str) -> Vec<f64> {
        let tokens = tokenize(text, TokenScheme::default());
        (0..tokens.len())
            .map(|i| -2.0 * unit_hash(&[prompt.as_bytes(), b"logprob", &i.to_le_bytes()]))
            .collect()
    }
}

#[async_trait]
impl Generator for ScriptedGenerator {
    async fn generate(
        &self,
        request: &GenerationRequest,
    ) -> Result<GenerationResult, BackendFailure> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let scripted = self.replies.get(&prompt_key(&request.prompt));
        let delay = scripted
            .and_then(|r| r.delay_ms)
            .map(Duration::from_millis)
            .unwrap_or(self.default_delay);
        if !delay.is_zero() {
            tokio::time::sleep(delay).await;
        }

        let text = match (scripted, &self.fallback) {
            (Some(reply), _) => reply.text.clone(),
            (None, Fallback::Echo) => request.prompt.clone(),
            (None, Fallback::Fixed(text)) => text.clone(),
            (None, Fallback::Fail) => {
                return Err(BackendFailure::Unavailable(format!(
                    "no scripted reply for prompt {}",
                    prompt_key(&request.prompt)
                )))
            }
        };
        let knowledge_scores = request.want_knowledge_scores.then(|| {
            scripted
                .and_then(|r| r.knowledge_scores.clone())
                .unwrap_or_else(|| Self::derived_scores(&request.prompt))
        });
        let token_logprobs = request.want_token_logprobs.then(|| {
            scripted
                .and_then(|r| r.token_logprobs.clone())
                .unwrap_or_else(|| Self::derived_logprobs(&request.prompt, &text))
        });
        Ok(GenerationResult {
            text,
            token_logprobs,
            knowledge_scores,
        })
    }
}

/// Search over a local snippet store.
///
/// Documents are ranked by how many distinct query tokens they contain;
/// documents sharing no token are never returned and ties keep insertion
/// order.
#[derive(Debug, Clone)]
pub struct CorpusSearch {
    documents: Vec<(KnowledgeSnippet, BTreeSet<String>)>,
    scheme: TokenScheme,
    delay: Duration,
}

impl CorpusSearch {
    pub fn new<I, S>(texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::from_snippets(texts.into_iter().enumerate().map(|(i, text)| {
            KnowledgeSnippet::new(text, KnowledgeSource::WebSearch)
                .with_provenance(format!("corpus:{i}"))
        }))
    }

    pub fn from_snippets(snippets: impl IntoIterator<Item = KnowledgeSnippet>) -> Self {
        let scheme = TokenScheme::default();
        let documents = snippets
            .into_iter()
            .map(|snippet| {
                let tokens = tokenize(&snippet.text, scheme).tokens().iter().cloned().collect();
                (snippet, tokens)
            })
            .collect();
        Self {
            documents,
            scheme,
            delay: Duration::ZERO,
        }
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// Overlap count between `query` and each stored document, in insertion order.
    pub fn overlaps(&self, query: &str) -> Vec<usize> {
        let query_tokens: BTreeSet<String> =
            tokenize(query, self.scheme).tokens().iter().cloned().collect();
        self.documents
            .iter()
            .map(|(_, doc)| query_tokens.intersection(doc).count())
            .collect()
    }
}

#[async_trait]
impl SearchEngine for CorpusSearch {
    async fn search(&self, query: &WebQuery, top_k: usize) -> Result<SearchResult, BackendFailure> {
        if top_k == 0 {
            return Err(BackendFailure::InvalidRequest("top_k must be positive".into()));
        }
        if !self.delay.is_zero() {
            tokio::time::sleep(self.delay).await;
        }
        let mut ranked: Vec<(usize, usize)> = self
            .overlaps(query.as_str())
            .into_iter()
            .enumerate()
            .filter(|(_, overlap)| *overlap > 0)
            .collect();
        if ranked.is_empty() {
            return Err(BackendFailure::EmptyResult);
        }
        // Stable sort keeps insertion order among equal overlaps.
        ranked.sort_by_key(|r| std::cmp::Reverse(r.1));
        let snippets = ranked
            .into_iter()
            .take(top_k)
            .map(|(i, _)| self.documents[i].0.clone())
            .collect();
        Ok(SearchResult { snippets })
    }
}

/// Hashed character-trigram count vector, L2-normalized.
///
/// Text is wrapped in boundary markers before trigrams are taken, so even a
/// single character yields one trigram.
#[derive(Debug, Clone)]
pub struct HashedTrigramEmbedder {
    dimension: usize,
}

impl Default for HashedTrigramEmbedder {
    fn default() -> Self {
        Self { dimension: 256 }
    }
}

const START: char = '\u{2}';
const END: char = '\u{3}';

fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    bytes.into_iter().fold(0xcbf2_9ce4_8422_2325, |hash, b| {
        (hash ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl HashedTrigramEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Bucket index of every trigram in `text`, in order.
    pub fn buckets(&self, text: &str) -> Vec<usize> {
        let chars: Vec<char> = std::iter::once(START)
            .chain(text.chars())
            .chain(std::iter::once(END))
            .collect();
        chars
            .windows(3)
            .map(|w| {
                let gram: String = w.iter().collect();
                (fnv1a(gram.bytes()) % self.dimension as u64) as usize
            })
            .collect()
    }

    pub fn embed_sync(&self, text: &str) -> EmbeddingVector {
        let mut counts = vec![0.0; self.dimension];
        for bucket in self.buckets(text) {
            counts[bucket] += 1.0;
        }
        let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm > 0.0 {
            counts.iter_mut().for_each(|c| *c /= norm);
        }
        EmbeddingVector::new(counts)
    }
}

#[async_trait]
impl Embedder for HashedTrigramEmbedder {
    async fn embed(&self, text: &str) -> Result<EmbeddingVector, BackendFailure> {
        if text.is_empty() {
            return Err(BackendFailure::InvalidRequest("text is empty".into()));
        }
        Ok(self.embed_sync(text))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::cosine_similarity;

    #[tokio::test]
    async fn scripted_lookup_and_echo() {
        let scripted = ScriptedGenerator::failing().with_reply("P1", ScriptedReply::text("hello"));
        let out = scripted.generate(&GenerationRequest::new("P1", 8)).await.unwrap();
        assert_eq!(out.text, "hello");
        assert!(scripted.generate(&GenerationRequest::new("P2", 8)).await.is_err());

        let echo = ScriptedGenerator::echo();
        let out = echo.generate(&GenerationRequest::new("X", 8)).await.unwrap();
        assert_eq!(out.text, "X");
        assert_eq!(echo.calls(), 1);
    }

    #[tokio::test]
    async fn knowledge_scores_follow_pool_size() {
        let echo = ScriptedGenerator::echo();
        let prompt = "背景：k1, k2. 对话：hi, [sMask]";
        let out = echo
            .generate(&GenerationRequest::new(prompt, 8).with_knowledge_scores())
            .await
            .unwrap();
        let scores = out.knowledge_scores.unwrap();
        assert_eq!(scores.len(), 2);
        assert!(scores.iter().all(|s| (0.0..1.0).contains(s)));
        assert!(out.token_logprobs.is_none());
    }

    #[tokio::test]
    async fn derived_logprobs_are_nonpositive_and_stable() {
        let echo = ScriptedGenerator::new(Fallback::Fixed("长城 is long".into()));
        let request = GenerationRequest::new("p", 8).with_token_logprobs();
        let a = echo.generate(&request).await.unwrap();
        let b = echo.generate(&request).await.unwrap();
        assert_eq!(a, b);
        let lps = a.token_logprobs.unwrap();
        assert_eq!(lps.len(), 4);
        assert!(lps.iter().all(|lp| *lp <= 0.0));
    }

    #[test]
    fn golden_table_keys_are_prompt_hashes() {
        let mut table = HashMap::new();
        table.insert(prompt_key("P1"), ScriptedReply::text("hello"));
        let from_table = ScriptedGenerator::from_table(table, Fallback::Fail);
        let built = ScriptedGenerator::failing().with_reply("P1", ScriptedReply::text("hello"));
        assert_eq!(from_table.replies, built.replies);
        assert_eq!(prompt_key("P1").len(), 64);
    }

    #[tokio::test]
    async fn corpus_ranks_by_overlap() {
        let corpus = CorpusSearch::new(["Great Wall of China", "apple pie recipe"]);
        let hit = corpus
            .search(&WebQuery::new("Great Wall").unwrap(), 1)
            .await
            .unwrap();
        assert_eq!(hit.snippets.len(), 1);
        assert_eq!(hit.snippets[0].text, "Great Wall of China");
        assert_eq!(hit.snippets[0].provenance.as_deref(), Some("corpus:0"));

        let miss = corpus.search(&WebQuery::new("quantum").unwrap(), 3).await;
        assert_eq!(miss, Err(BackendFailure::EmptyResult));
        assert!(corpus.search(&WebQuery::new("x").unwrap(), 0).await.is_err());
    }

    #[tokio::test]
    async fn corpus_ties_keep_insertion_order_and_respect_top_k() {
        let corpus = CorpusSearch::new(["tea one", "tea two", "tea three", "coffee"]);
        let q = WebQuery::new("tea").unwrap();
        let two = corpus.search(&q, 2).await.unwrap();
        let texts: Vec<_> = two.snippets.iter().map(|s| s.text.as_str()).collect();
        assert_eq!(texts, ["tea one", "tea two"]);
        let all = corpus.search(&q, 10).await.unwrap();
        assert_eq!(all.snippets.len(), 3);
    }

    #[tokio::test]
    async fn trigram_embedding_properties() {
        let embedder = HashedTrigramEmbedder::default();
        let a = embedder.embed("长城有多长").await.unwrap();
        assert_eq!(a, embedder.embed("长城有多长").await.unwrap());
        assert_eq!(a.dimension(), 256);
        assert!((a.norm() - 1.0).abs() < 1e-12);
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(embedder.embed("").await.is_err());
    }

    #[test]
    fn disjoint_trigram_buckets_give_zero_cosine() {
        let embedder = HashedTrigramEmbedder::default();
        // Hand-picked pair with no shared characters; the bucket sets are
        // checked for disjointness before relying on the zero.
        let (left, right) = ("abc", "xyz");
        let lb: BTreeSet<_> = embedder.buckets(left).into_iter().collect();
        let rb: BTreeSet<_> = embedder.buckets(right).into_iter().collect();
        assert!(lb.is_disjoint(&rb), "{lb:?} vs {rb:?}");
        let cos = cosine_similarity(&embedder.embed_sync(left), &embedder.embed_sync(right)).unwrap();
        assert_eq!(cos, 0.0);
    }
}
