//! `convograph` command-line tool.
//!
//! Exit codes: 0 success, 2 usage, 3 I/O, 4 invalid input, 5 index file
//! format or version, 6 model unreachable, 7 configuration, 8 server.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use convograph::config::{Ablation, EngineConfig};
use convograph::corpus::{load_corpus, split_eval_instances, CorpusOptions, History, Turn};
use convograph::eval::{render_table, run_experiment, RunOptions};
use convograph::index::{build_index, load_index, save_index, Index};
use convograph::kg::{load_kg, KgOptions};
use convograph::llm::cache::{CachedClient, ResponseCache};
use convograph::llm::http::{HttpChatClient, HttpClientConfig};
use convograph::llm::mock::{MockBehavior, MockChatClient};
use convograph::llm::ChatClient;
use convograph::pipeline::{Engine, Query, Recommendation, RetrievalMethod};
use convograph::synth::{generate, SynthConfig};
use convograph_server::{AppState, ServerError};

#[derive(Parser)]
#[command(
    name = "convograph",
    version,
    about = "Conversational recommendation over a conversation-entity graph"
)]
struct Cli {
    /// Engine configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build an index from a catalog and a dialogue corpus.
    Index {
        #[arg(long)]
        kg: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recommend for a conversation history.
    Recommend {
        #[arg(long)]
        index: PathBuf,
        /// One turn per line, optionally prefixed `user:` or `recommender:`.
        #[arg(long)]
        history: PathBuf,
        /// Rerank with a model that keeps the retrieval order.
        #[arg(long)]
        mock_llm: bool,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Score a held-out corpus and print a metric table.
    Eval {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Repeat for several rows.
        #[arg(long, value_parser = parse_ablation, default_value = "none")]
        ablation: Vec<Ablation>,
        #[arg(long)]
        mock_llm: bool,
        /// Score the retrieval order without calling a model.
        #[arg(long)]
        retrieval_only: bool,
        /// Write the full report (JSON) here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Per-instance checkpoint for resumable runs; with several
        /// ablations one file per ablation is derived from it.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Serve the HTTP API until interrupted.
    Serve {
        #[arg(long)]
        index: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        mock_llm: bool,
    },
    /// Write the synthetic catalog and corpora.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = SynthConfig::default().seed)]
        seed: u64,
    },
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: convograph::Error| e.to_string())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", describe(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}

/// Joins the cause chain, skipping causes already spelled out by the layer above.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use convograph::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io { .. } => 3,
                E::Parse { .. }
                | E::Validation(_)
                | E::UnresolvedEntity { .. }
                | E::InvalidParameter(_)
                | E::EmptySeeds
                | E::PromptBudget { .. } => 4,
                E::IndexFormat(_) | E::IndexVersion { .. } | E::IndexChecksum => 5,
                E::Llm(_) => 6,
                E::Config(_) => 7,
            };
        }
        if let Some(e) = cause.downcast_ref::<ServerError>() {
            return match e {
                ServerError::Io { .. } => 3,
                ServerError::Snapshot(_) => 7,
                ServerError::Bind { .. } | ServerError::Serve(_) => 8,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
        if cause.downcast_ref::<InputError>().is_some() {
            return 4;
        }
    }
    1
}

/// Bad command input not covered by the library's error kinds.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct InputError(String);

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = match &cli.config {
        Some(path) => EngineConfig::load(path)?,
        None => EngineConfig::default(),
    };
    match cli.command {
        Command::Index { kg, corpus, out } => cmd_index(&config, &kg, &corpus, &out),
        Command::Recommend {
            index,
            history,
            mock_llm,
            k,
            n,
        } => cmd_recommend(config, &index, &history, mock_llm, k, n),
        Command::Eval {
            index,
            test,
            ablation,
            mock_llm,
            retrieval_only,
            report,
            checkpoint,
        } => cmd_eval(
            config,
            &index,
            &test,
            &ablation,
            mock_llm,
            retrieval_only,
            report,
            checkpoint,
        ),
        Command::Serve {
            index,
            port,
            host,
            mock_llm,
        } => cmd_serve(config, &index, &host, port, mock_llm),
        Command::Synth { out, seed } => cmd_synth(&out, seed),
    }
}

fn open_index(path: &Path) -> anyhow::Result<Arc<Index>> {
    let index = load_index(path).with_context(|| format!("loading index {}", path.display()))?;
    Ok(Arc::new(index))
}

fn make_client(config: &EngineConfig, mock: bool) -> anyhow::Result<Arc<dyn ChatClient>> {
    if mock {
        return Ok(Arc::new(MockChatClient::new(MockBehavior::Identity)));
    }
    let llm = &config.llm;
    let http = HttpChatClient::new(HttpClientConfig {
        base_url: llm.api_base_url.clone(),
        model: llm.model.clone(),
        api_key: std::env::var(&llm.api_key_env).ok(),
        retries: llm.retries,
        backoff_base: Duration::from_millis(llm.backoff_ms),
        timeout: Duration::from_secs(llm.timeout_secs),
        max_in_flight: llm.max_in_flight,
    });
    Ok(match &llm.cache_dir {
        Some(dir) => Arc::new(CachedClient::new(http, ResponseCache::open(dir)?)),
        None => Arc::new(http),
    })
}

fn cmd_index(config: &EngineConfig, kg: &Path, corpus: &Path, out: &Path) -> anyhow::Result<()> {
    let kg = load_kg(kg, KgOptions::default())?;
    let corpus = load_corpus(corpus, &kg, CorpusOptions::default())?;
    let index = build_index(kg, corpus, config.index.clone())?;
    save_index(&index, out)?;
    let s = index.stats();
    println!(
        "entities={} items={} conversations={} edges={} mention={} cooccurrence={} recommendation={} kg={} isolated={} frequency_nnz={}",
        s.entities,
        s.items,
        s.conversations,
        s.edges,
        s.mention_edges,
        s.cooccurrence_edges,
        s.recommendation_edges,
        s.kg_edges,
        s.isolated_conversations,
        s.frequency_nonzeros
    );
    Ok(())
}

fn read_history(path: &Path) -> anyhow::Result<History> {
    let text = std::fs::read_to_string(path).map_err(|e| convograph::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut turns = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let lower = line.to_lowercase();
        let turn = if lower.starts_with("user:") {
            Turn::user(line[5..].trim())
        } else if lower.starts_with("recommender:") {
            Turn::recommender(line[12..].trim())
        } else {
            Turn::user(line)
        };
        turns.push(turn);
    }
    if turns.is_empty() {
        bail!(InputError(format!("{}: history is empty", path.display())));
    }
    Ok(History::from_turns(turns))
}

fn cmd_recommend(
    config: EngineConfig,
    index: &Path,
    history: &Path,
    mock: bool,
    k: Option<usize>,
    n: Option<usize>,
) -> anyhow::Result<()> {
    let index = open_index(index)?;
    let history = read_history(history)?;
    let client = make_client(&config, mock)?;
    let engine = Engine::new(index.clone(), config)?.with_llm_extractor(client.clone());
    let query = Query {
        k,
        n,
        ..Query::new(history)
    };
    let rec = engine.recommend(&query, client.as_ref())?;
    if let Some(err) = &rec.llm_error {
        return Err(
            anyhow::Error::new(convograph::Error::Llm(convograph::llm::LlmError::Unavailable(
                err.clone(),
            )))
            .context("reranking failed; rerun with --mock-llm for retrieval order"),
        );
    }
    if rec.retrieval.method == RetrievalMethod::Popularity {
        eprintln!("warning: no entities linked; ranking by popularity");
    }
    print!("{}", render_recommendation(&index, &rec));
    Ok(())
}

fn render_recommendation(index: &Index, rec: &Recommendation) -> String {
    use std::fmt::Write;
    let kg = &index.kg;
    let label = |e| {
        let entity = kg.entity(e);
        format!("{} [{}]", entity.name, entity.key)
    };
    let r = &rec.retrieval;
    let mut out = String::new();
    let method = match r.method {
        RetrievalMethod::Graph => "graph",
        RetrievalMethod::ReasonerOnly => "reasoner-only",
        RetrievalMethod::Lexical => "lexical",
        RetrievalMethod::Popularity => "popularity",
    };
    writeln!(out, "retrieval: {method}").unwrap();
    writeln!(out, "linked entities:").unwrap();
    for &e in &r.mentioned {
        writeln!(out, "  {}", label(e)).unwrap();
    }
    writeln!(out, "expanded entities:").unwrap();
    for s in &r.expanded {
        writeln!(out, "  {}  {:.6}", label(s.entity), s.score).unwrap();
    }
    writeln!(out, "candidates ({}):", r.items.len()).unwrap();
    for (i, item) in r.items.iter().enumerate() {
        writeln!(out, "  {:>3}. {}  {:.6}", i + 1, label(item.item), item.score).unwrap();
    }
    writeln!(out, "example conversations:").unwrap();
    for c in &r.conversations {
        writeln!(out, "  {}  {:.6}", index.conversation(c.conversation).key, c.score).unwrap();
    }
    writeln!(out, "recommendations:").unwrap();
    for (i, &item) in rec.result.ranked_items.iter().enumerate() {
        writeln!(out, "  {:>3}. {}", i + 1, label(item)).unwrap();
    }
    writeln!(out, "reasoning:").unwrap();
    for line in rec.result.reasoning.lines() {
        writeln!(out, "  {line}").unwrap();
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    config: EngineConfig,
    index: &Path,
    test: &Path,
    ablations: &[Ablation],
    mock: bool,
    retrieval_only: bool,
    report: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
) -> anyhow::Result<()> {
    let index = open_index(index)?;
    let test = load_corpus(test, &index.kg, CorpusOptions::default())?;
    let instances = split_eval_instances(&test);
    if instances.is_empty() {
        bail!(InputError("test corpus yields no evaluation instances".into()));
    }
    let client = make_client(&config, mock || retrieval_only)?;
    let mut reports = Vec::new();
    for &ablation in ablations {
        let engine =
            Engine::new(index.clone(), config.clone().with_ablation(ablation))?.with_llm_extractor(client.clone());
        let checkpoint = checkpoint.as_ref().map(|p| {
            if ablations.len() == 1 {
                p.clone()
            } else {
                p.with_extension(format!("{}.jsonl", ablation.as_str()))
            }
        });
        let options = RunOptions {
            checkpoint,
            retrieval_only,
        };
        let r = run_experiment(&engine, &instances, client.as_ref(), &options)
            .with_context(|| format!("evaluating {}", ablation.as_str()))?;
        reports.push(r);
    }
    print!("{}", render_table(&reports));
    for r in &reports {
        println!("{} fingerprint {}", r.ablation.as_str(), r.fingerprint);
        if r.grounding_violations > 0 || r.fallbacks > 0 {
            println!(
                "{}: {} grounding violations, {} fallbacks",
                r.ablation.as_str(),
                r.grounding_violations,
                r.fallbacks
            );
        }
    }
    if let Some(path) = report {
        let body = if reports.len() == 1 {
            serde_json::to_string_pretty(&reports[0])?
        } else {
            serde_json::to_string_pretty(&reports)?
        };
        std::fs::write(&path, body).map_err(|e| convograph::Error::Io { path, source: e })?;
    }
    Ok(())
}

fn cmd_serve(config: EngineConfig, index: &Path, host: &str, port: u16, mock: bool) -> anyhow::Result<()> {
    let index = open_index(index)?;
    let client = make_client(&config, mock)?;
    let engine = Arc::new(Engine::new(index, config)?.with_llm_extractor(client.clone()));
    let state = AppState::new(engine, client)?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let addr = format!("{host}:{port}");
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|source| ServerError::Bind { addr, source })?;
        println!("listening on http://{}", listener.local_addr()?);
        convograph_server::serve(listener, state, shutdown_signal()).await?;
        anyhow::Ok(())
    })
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
    tracing::info!("shutting down");
}

fn cmd_synth(out: &Path, seed: u64) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).map_err(|e| convograph::Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let data = generate(&SynthConfig {
        seed,
        ..SynthConfig::default()
    });
    data.write(out)?;
    println!("wrote kg.tsv, train.jsonl, test.jsonl to {}", out.display());
    Ok(())
}
