//! The `racetrack` command line.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use racetrack_core::arena::{Arena, OpeningPool};
use racetrack_core::backends::{
    Backends, CorpusSearch, Fallback, HashedTrigramEmbedder, HttpBackend, ScriptedGenerator,
};
use racetrack_core::databuilder::{
    build_instances, inject_negatives, BuildMode, EntityCandidate, DEFAULT_NEGATIVE_THRESHOLD,
};
use racetrack_core::evalkit::{
    aggregate_annotations, dataset_stats, evaluate_benchmark, parse_benchmark, parse_human_scores,
    self_chat, BenchmarkExample, BenchmarkOptions,
};
use racetrack_core::metrics::{
    corpus_mean, evaluate_pair, BleuConfig, BrevityPenaltyMode, IdfTable, MetricConfig, MetricReport,
};
use racetrack_core::pipeline::PipelineMode;
use serde::Serialize;

use crate::api::{self, AppState};
use crate::config::{ServiceConfig, CONFIG_ENV};
use crate::eventlog::{self, JsonlEventLog};
use crate::mocks::{self, MockBackends};

#[derive(Debug, Parser)]
#[command(name = "racetrack", version, about = "Knowledge-grounded dialogue racetrack and evaluation tools")]
pub struct Cli {
    /// Service config file.
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP API.
    Serve {
        /// Overrides `listen` from the config.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Serve built-in mock backends over the `/v1/*` protocol.
    ServeMocks {
        #[arg(long, default_value = "127.0.0.1:9000")]
        listen: String,
        /// Documents for the search mock, one per line.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Fixed generator reply; the generator echoes prompts when absent.
        #[arg(long)]
        reply: Option<String>,
        #[arg(long, default_value_t = 256)]
        dimension: usize,
    },
    /// Rebuild state from an event log and print a summary with rankings.
    Replay {
        #[arg(long)]
        log: PathBuf,
    },
    #[command(subcommand)]
    Metrics(MetricsCommand),
    #[command(subcommand)]
    Eval(EvalCommand),
    #[command(subcommand)]
    Data(DataCommand),
}

#[derive(Debug, Subcommand)]
pub enum MetricsCommand {
    /// Score candidate lines against reference lines.
    Eval {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        references: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// `token<TAB>weight` lines; uniform weights when absent.
        #[arg(long)]
        idf: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = BpArg::Standard)]
        brevity_penalty: BpArg,
        /// Remote embedder base URL; the hashed-trigram embedder when absent.
        #[arg(long)]
        embed_url: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BpArg {
    Standard,
    LengthScaled,
}

impl From<BpArg> for BrevityPenaltyMode {
    fn from(a: BpArg) -> Self {
        match a {
            BpArg::Standard => BrevityPenaltyMode::Standard,
            BpArg::LengthScaled => BrevityPenaltyMode::LengthScaled,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Full,
    PreClassifier,
    NoKnowledge,
}

impl From<ModeArg> for PipelineMode {
    fn from(a: ModeArg) -> Self {
        match a {
            ModeArg::Full => PipelineMode::Full,
            ModeArg::PreClassifier => PipelineMode::PreClassifier,
            ModeArg::NoKnowledge => PipelineMode::NoKnowledge,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Let a configured bot chat with itself from every opening.
    Selfchat {
        #[arg(long)]
        openings: PathBuf,
        #[arg(long)]
        bot: String,
        #[arg(long)]
        turns: usize,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the bot's configured mode.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Automatic metrics of a configured bot on a benchmark file.
    Bench {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        bot: String,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, default_value_t = 16)]
        concurrency: usize,
    },
    /// Session, utterance and question-type counts of a benchmark file.
    Stats {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Aggregate explicit human scores.
    Human {
        #[arg(long)]
        annotations: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum DataCommand {
    /// Build training instances, optionally injecting negative snippets.
    Build {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_parser = parse_build_mode)]
        mode: BuildMode,
        /// One JSON array of entity candidates per line, aligned with the
        /// input records.
        #[arg(long)]
        negatives: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_NEGATIVE_THRESHOLD)]
        tau: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_build_mode(s: &str) -> Result<BuildMode, String> {
    s.parse()
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<ServiceConfig> {
    let path = path.with_context(|| format!("no config given; pass --config or set {CONFIG_ENV}"))?;
    let config = ServiceConfig::load(path)?;
    config.validate()?;
    Ok(config)
}

/// Runs one command; printable results go to stdout.
pub async fn run(cli: Cli) -> Result<()> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Serve { listen } => serve(load_config(config)?, listen).await,
        Command::ServeMocks {
            listen,
            corpus,
            reply,
            dimension,
        } => serve_mocks(&listen, corpus.as_deref(), reply, dimension).await,
        Command::Replay { log } => {
            println!("{}", serde_json::to_string_pretty(&replay_summary(&log)?)?);
            Ok(())
        }
        Command::Metrics(MetricsCommand::Eval {
            candidates,
            references,
            report,
            idf,
            brevity_penalty,
            embed_url,
        }) => {
            let out = metrics_eval(&candidates, &references, idf.as_deref(), brevity_penalty.into(), embed_url).await?;
            write_json(&report, &out)?;
            println!("{}", serde_json::to_string_pretty(&out.corpus)?);
            Ok(())
        }
        Command::Eval(cmd) => eval(config, cmd).await,
        Command::Data(DataCommand::Build {
            input,
            mode,
            negatives,
            tau,
            out,
        }) => {
            let n = data_build(&input, mode, negatives.as_deref(), tau, &out)?;
            println!("wrote {n} instances to {}", out.display());
            Ok(())
        }
    }
}

pub async fn serve(config: ServiceConfig, listen: Option<String>) -> Result<()> {
    let (log, state) = JsonlEventLog::open(&config.event_log)
        .with_context(|| format!("opening event log {}", config.event_log.display()))?;
    let roster = config.roster()?;
    if roster.len() < 2 {
        bail!("the racetrack needs at least 2 bots, config has {}", roster.len());
    }
    let arena = Arena::from_state(state, roster, Box::new(log) as api::SharedSink, config.seed);
    let app = AppState::new(arena, config.opening_pool()?, config.admin_token.clone(), config.seed);
    let addr = listen.unwrap_or(config.listen);
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    eprintln!("racetrack listening on {}", listener.local_addr()?);
    axum::serve(listener, api::router(Arc::new(app)))
        .with_graceful_shutdown(shutdown())
        .await?;
    Ok(())
}

async fn shutdown() {
    let _ = tokio::signal::ctrl_c().await;
}

pub fn mock_backends(corpus: Vec<String>, reply: Option<String>, dimension: usize) -> MockBackends {
    let generator = match reply {
        Some(text) => ScriptedGenerator::new(Fallback::Fixed(text)),
        None => ScriptedGenerator::echo(),
    };
    MockBackends {
        generator: Arc::new(generator),
        search: Arc::new(CorpusSearch::new(corpus)),
        embedder: Arc::new(HashedTrigramEmbedder::new(dimension)),
    }
}

async fn serve_mocks(listen: &str, corpus: Option<&Path>, reply: Option<String>, dimension: usize) -> Result<()> {
    if dimension == 0 {
        bail!("dimension must be positive");
    }
    let docs = match corpus {
        Some(p) => read(p)?.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_owned).collect(),
        None => Vec::new(),
    };
    let listener = tokio::net::TcpListener::bind(listen)
        .await
        .with_context(|| format!("binding {listen}"))?;
    eprintln!("mock backends listening on {}", listener.local_addr()?);
    axum::serve(listener, mocks::router(mock_backends(docs, reply, dimension)))
        .with_graceful_shutdown(shutdown())
        .await?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct ReplaySummary {
    pub events: u64,
    pub sessions: usize,
    pub open_sessions: usize,
    pub valid_sessions: usize,
    pub ranking: Vec<racetrack_core::arena::RankingEntry>,
}

/// Offline admin view; includes bot ids.
pub fn replay_summary(log: &Path) -> Result<ReplaySummary> {
    let file = std::fs::File::open(log).with_context(|| format!("opening {}", log.display()))?;
    let (state, events) = eventlog::replay(file)?;
    Ok(ReplaySummary {
        events,
        sessions: state.len(),
        open_sessions: state.sessions().filter(|s| s.closed_at_ms.is_none()).count(),
        valid_sessions: state.sessions().filter(|s| s.counts_toward_ranking()).count(),
        ranking: state.ranking(),
    })
}

#[derive(Debug, Serialize)]
pub struct MetricsOutput {
    pub pairs: usize,
    pub corpus: MetricReport,
    pub per_pair: Vec<MetricReport>,
}

fn lines(text: &str) -> Vec<&str> {
    let mut lines: Vec<&str> = text.lines().collect();
    while lines.last().is_some_and(|l| l.trim().is_empty()) {
        lines.pop();
    }
    lines
}

pub async fn metrics_eval(
    candidates: &Path,
    references: &Path,
    idf: Option<&Path>,
    bp: BrevityPenaltyMode,
    embed_url: Option<String>,
) -> Result<MetricsOutput> {
    let (cand_text, ref_text) = (read(candidates)?, read(references)?);
    let (cands, refs) = (lines(&cand_text), lines(&ref_text));
    if cands.len() != refs.len() {
        bail!("{} candidates but {} references", cands.len(), refs.len());
    }
    if cands.is_empty() {
        bail!("no candidate lines");
    }
    let config = MetricConfig {
        bleu: BleuConfig::uniform(4, bp),
        idf: match idf {
            Some(p) => IdfTable::parse(&read(p)?)?,
            None => IdfTable::uniform(),
        },
        ..MetricConfig::default()
    };
    let embedder: Arc<dyn racetrack_core::backends::Embedder> = match embed_url {
        Some(url) => Arc::new(HttpBackend::new(url, racetrack_core::backends::DEFAULT_TIMEOUT)?),
        None => Arc::new(HashedTrigramEmbedder::default()),
    };
    let backends = Backends::new(
        Arc::new(ScriptedGenerator::failing()),
        Arc::new(CorpusSearch::new(Vec::<String>::new())),
        embedder,
    );
    let mut per_pair = Vec::with_capacity(cands.len());
    for (c, r) in cands.iter().zip(&refs) {
        per_pair.push(evaluate_pair(c, r, &config, &backends).await?);
    }
    Ok(MetricsOutput {
        pairs: per_pair.len(),
        corpus: corpus_mean(&per_pair)?,
        per_pair,
    })
}

async fn eval(config: Option<&Path>, cmd: EvalCommand) -> Result<()> {
    match cmd {
        EvalCommand::Selfchat {
            openings,
            bot,
            turns,
            out,
            mode,
        } => {
            let config = load_config(config)?;
            let (bot_config, pipeline) = config.bot(&bot)?;
            let mode = mode.map_or(bot_config.mode, PipelineMode::from);
            let pool = OpeningPool::parse_jsonl(&read(&openings)?)?;
            std::fs::create_dir_all(&out)?;
            for opening in pool.openings() {
                let log = self_chat(&opening.text, &pipeline, mode, turns).await?;
                let record = serde_json::json!({
                    "opening": opening,
                    "bot": bot,
                    "mode": mode,
                    "log": log,
                });
                write_json(&out.join(format!("{}.json", opening.id)), &record)?;
            }
            println!("wrote {} dialogues to {}", pool.len(), out.display());
            Ok(())
        }
        EvalCommand::Bench {
            dataset,
            bot,
            report,
            mode,
            concurrency,
        } => {
            let config = load_config(config)?;
            let (bot_config, pipeline) = config.bot(&bot)?;
            let examples = parse_benchmark(&read(&dataset)?)?
                .iter()
                .map(|r| r.to_example())
                .collect::<Result<Vec<BenchmarkExample>, _>>()?;
            let options = BenchmarkOptions {
                mode: mode.map_or(bot_config.mode, PipelineMode::from),
                concurrency,
                ..BenchmarkOptions::default()
            };
            let out = evaluate_benchmark(&examples, &pipeline, &options).await?;
            write_json(&report, &out)?;
            println!("{}", serde_json::to_string_pretty(&out.corpus)?);
            Ok(())
        }
        EvalCommand::Stats { dataset } => {
            let stats = dataset_stats(&parse_benchmark(&read(&dataset)?)?)?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
            Ok(())
        }
        EvalCommand::Human { annotations } => {
            let aggregates = aggregate_annotations(&parse_human_scores(&read(&annotations)?)?)?;
            println!("{}", serde_json::to_string_pretty(&aggregates)?);
            Ok(())
        }
    }
}

/// Returns the number of instances written.
pub fn data_build(input: &Path, mode: BuildMode, negatives: Option<&Path>, tau: f64, out: &Path) -> Result<usize> {
    let mut instances = build_instances(&read(input)?, mode)?;
    if let Some(path) = negatives {
        let text = read(path)?;
        let candidates: Vec<Vec<EntityCandidate>> = text
            .lines()
            .enumerate()
            .map(|(i, l)| {
                if l.trim().is_empty() {
                    return Ok(Vec::new());
                }
                let parsed: Vec<EntityCandidate> =
                    serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1))?;
                // Re-run the constructor check on deserialized values.
                parsed
                    .into_iter()
                    .map(|c| EntityCandidate::new(c.surface, c.description, c.confidence).map_err(anyhow::Error::from))
                    .collect()
            })
            .collect::<Result<_>>()?;
        if candidates.len() > instances.len() {
            bail!("{} negative lines but only {} instances", candidates.len(), instances.len());
        }
        for (instance, cands) in instances.iter_mut().zip(&candidates) {
            *instance = inject_negatives(instance, cands, tau)?;
        }
    }
    let mut body = String::new();
    for instance in &instances {
        body.push_str(&serde_json::to_string(instance)?);
        body.push('\n');
    }
    std::fs::write(out, body).with_context(|| format!("writing {}", out.display()))?;
    Ok(instances.len())
}
