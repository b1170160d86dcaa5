//! Service configuration, read from one TOML file.
//!
//! ```toml
//! listen = "127.0.0.1:8080"
//! event_log = "events.jsonl"
//! seed = 7
//!
//! [backends.remote]
//! kind = "http"
//! base_url = "http://127.0.0.1:9000"
//!
//! [[bots]]
//! id = "bot-a"
//! mode = "full"
//! generator = "remote"
//! search = "remote"
//! embedder = "remote"
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use racetrack_core::arena::{OpeningPool, Roster};
use racetrack_core::backends::{
    Backends, CorpusSearch, Embedder, Fallback, Generator, HashedTrigramEmbedder, HttpBackend,
    ScriptedGenerator, ScriptedReply, SearchEngine,
};
use racetrack_core::pipeline::{Pipeline, PipelineConfig, PipelineMode};
use serde::Deserialize;
use thiserror::Error;

/// Environment variable naming the config file when `--config` is absent.
pub const CONFIG_ENV: &str = "DIALOG_RACETRACK_CONFIG";

/// Bundled opening pool, used when the config names none.
pub const DEFAULT_OPENINGS: &str = include_str!("../data/openings.jsonl");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    pub event_log: PathBuf,
    /// Opening pool in JSON Lines; the bundled pool when absent.
    #[serde(default)]
    pub openings: Option<PathBuf>,
    /// Unlocks bot ids in the ranking and `/api/bots`.
    #[serde(default)]
    pub admin_token: Option<String>,
    #[serde(default)]
    pub seed: u64,
    /// Snippets per response prompt for bots that do not set their own.
    #[serde(default = "default_pool_size")]
    pub pool_size: usize,
    /// Per-call backend timeout in milliseconds.
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub backends: BTreeMap<String, BackendConfig>,
    #[serde(default)]
    pub bots: Vec<BotConfig>,
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

fn default_pool_size() -> usize {
    1
}

fn default_timeout_ms() -> u64 {
    racetrack_core::backends::DEFAULT_TIMEOUT.as_millis() as u64
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    /// A remote service speaking the `/v1/*` protocol; provides all three
    /// capabilities.
    Http {
        base_url: String,
        #[serde(default)]
        timeout_ms: Option<u64>,
    },
    /// Generator returning its prompt.
    Echo,
    /// Generator returning the same text for every prompt.
    Fixed { text: String },
    /// Generator with per-prompt replies; unlisted prompts get `fallback`, or
    /// fail when it is absent.
    Scripted {
        #[serde(default)]
        replies: BTreeMap<String, ScriptedReply>,
        #[serde(default)]
        fallback: Option<String>,
    },
    /// Token-overlap search over inline documents and/or a file with one
    /// document per line.
    Corpus {
        #[serde(default)]
        documents: Vec<String>,
        #[serde(default)]
        path: Option<PathBuf>,
    },
    HashedTrigram {
        #[serde(default)]
        dimension: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BotConfig {
    pub id: String,
    #[serde(default)]
    pub mode: PipelineMode,
    pub generator: String,
    pub search: String,
    pub embedder: String,
    #[serde(default)]
    pub pool_size: Option<usize>,
    #[serde(default)]
    pub classifier_threshold: Option<f64>,
    #[serde(default)]
    pub iterative_injection: bool,
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    /// Reads the file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.rebase(base);
        Ok(config)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.event_log);
        if let Some(p) = &mut self.openings {
            fix(p);
        }
        for backend in self.backends.values_mut() {
            if let BackendConfig::Corpus { path: Some(p), .. } = backend {
                fix(p);
            }
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    /// Checks everything that can be checked without network access.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |msg: String| Err(ConfigError::Invalid(msg));
        if self.pool_size == 0 {
            return invalid("pool_size must be at least 1".into());
        }
        if let Some(p) = &self.openings {
            if !p.is_file() {
                return invalid(format!("openings file {} does not exist", p.display()));
            }
        }
        if let Some(dir) = self.event_log.parent().filter(|d| !d.as_os_str().is_empty()) {
            if !dir.is_dir() {
                return invalid(format!("event log directory {} does not exist", dir.display()));
            }
        }
        for (name, backend) in &self.backends {
            if let BackendConfig::Corpus { path: Some(p), .. } = backend {
                if !p.is_file() {
                    return invalid(format!("corpus file {} of backend {name} does not exist", p.display()));
                }
            }
        }
        let mut ids = std::collections::BTreeSet::new();
        for bot in &self.bots {
            if !ids.insert(&bot.id) {
                return invalid(format!("bot {} is listed twice", bot.id));
            }
            if bot.pool_size == Some(0) {
                return invalid(format!("bot {}: pool_size must be at least 1", bot.id));
            }
            if let Some(t) = bot.classifier_threshold {
                if !(0.0..=1.0).contains(&t) {
                    return invalid(format!("bot {}: classifier_threshold {t} is outside [0, 1]", bot.id));
                }
            }
        }
        Ok(())
    }

    pub fn opening_pool(&self) -> Result<OpeningPool, ConfigError> {
        let text = match &self.openings {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                path: p.clone(),
                source,
            })?,
            None => DEFAULT_OPENINGS.to_owned(),
        };
        OpeningPool::parse_jsonl(&text).map_err(|e| ConfigError::Invalid(format!("openings: {e}")))
    }

    fn backend(&self, name: &str, bot: &str) -> Result<&BackendConfig, ConfigError> {
        self.backends
            .get(name)
            .ok_or_else(|| ConfigError::Invalid(format!("bot {bot} names unknown backend {name}")))
    }

    fn http(&self, base_url: &str, timeout_ms: Option<u64>) -> Result<HttpBackend, ConfigError> {
        let timeout = timeout_ms.map_or(self.timeout(), Duration::from_millis);
        HttpBackend::new(base_url, timeout).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    fn generator(&self, name: &str, bot: &str) -> Result<Arc<dyn Generator>, ConfigError> {
        Ok(match self.backend(name, bot)? {
            BackendConfig::Http { base_url, timeout_ms } => Arc::new(self.http(base_url, *timeout_ms)?),
            BackendConfig::Echo => Arc::new(ScriptedGenerator::echo()),
            BackendConfig::Fixed { text } => Arc::new(ScriptedGenerator::new(Fallback::Fixed(text.clone()))),
            BackendConfig::Scripted { replies, fallback } => {
                let fallback = fallback.clone().map_or(Fallback::Fail, Fallback::Fixed);
                let mut generator = ScriptedGenerator::new(fallback);
                for (prompt, reply) in replies {
                    generator.insert(prompt, reply.clone());
                }
                Arc::new(generator)
            }
            _ => return Err(ConfigError::Invalid(format!("backend {name} cannot generate text"))),
        })
    }

    fn search(&self, name: &str, bot: &str) -> Result<Arc<dyn SearchEngine>, ConfigError> {
        Ok(match self.backend(name, bot)? {
            BackendConfig::Http { base_url, timeout_ms } => Arc::new(self.http(base_url, *timeout_ms)?),
            BackendConfig::Corpus { documents, path } => {
                let mut docs = documents.clone();
                if let Some(p) = path {
                    let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                        path: p.clone(),
                        source,
                    })?;
                    docs.extend(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_owned));
                }
                Arc::new(CorpusSearch::new(docs))
            }
            _ => return Err(ConfigError::Invalid(format!("backend {name} cannot search"))),
        })
    }

    fn embedder(&self, name: &str, bot: &str) -> Result<Arc<dyn Embedder>, ConfigError> {
        Ok(match self.backend(name, bot)? {
            BackendConfig::Http { base_url, timeout_ms } => Arc::new(self.http(base_url, *timeout_ms)?),
            BackendConfig::HashedTrigram { dimension } => match dimension {
                Some(0) => return Err(ConfigError::Invalid(format!("backend {name}: dimension must be positive"))),
                Some(d) => Arc::new(HashedTrigramEmbedder::new(*d)),
                None => Arc::new(HashedTrigramEmbedder::default()),
            },
            _ => return Err(ConfigError::Invalid(format!("backend {name} cannot embed"))),
        })
    }

    pub fn pipeline(&self, bot: &BotConfig) -> Result<Pipeline, ConfigError> {
        let backends = Backends::new(
            self.generator(&bot.generator, &bot.id)?,
            self.search(&bot.search, &bot.id)?,
            self.embedder(&bot.embedder, &bot.id)?,
        )
        .with_timeout(self.timeout());
        let defaults = PipelineConfig::default();
        Ok(Pipeline::new(backends).with_config(PipelineConfig {
            pool_size: bot.pool_size.unwrap_or(self.pool_size),
            classifier_threshold: bot.classifier_threshold.unwrap_or(defaults.classifier_threshold),
            iterative_injection: bot.iterative_injection,
            ..defaults
        }))
    }

    pub fn bot(&self, id: &str) -> Result<(&BotConfig, Pipeline), ConfigError> {
        let bot = self
            .bots
            .iter()
            .find(|b| b.id == id)
            .ok_or_else(|| ConfigError::Invalid(format!("no bot named {id}")))?;
        Ok((bot, self.pipeline(bot)?))
    }

    pub fn roster(&self) -> Result<Roster, ConfigError> {
        self.bots.iter().try_fold(Roster::new(), |roster, bot| {
            Ok(roster.with_bot(bot.id.clone(), bot.mode, self.pipeline(bot)?))
        })
    }
}
