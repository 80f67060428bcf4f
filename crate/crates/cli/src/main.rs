use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use kgscout_client::Client;
use kgscout_core::agent::{self, render_case, Providers};
use kgscout_core::config::{LlmBackend, Settings};
use kgscout_core::eval::{load_dataset_file, run_eval, EvalOptions};
use kgscout_core::{EntityId, KnowledgeGraph, ReflectionStrategy};
use kgscout_service::{AppState, EntityReport};

#[derive(Parser)]
#[command(name = "kgscout", version, about = "Knowledge graph question answering agent")]
struct Cli {
    /// Settings file (TOML). Relative paths inside it resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Flags that take precedence over the settings file.
#[derive(Args, Default)]
struct Overrides {
    /// Iteration cap per question.
    #[arg(long, global = true)]
    max_iterations: Option<usize>,
    /// Observation hop depth.
    #[arg(long, global = true)]
    depth_limit: Option<usize>,
    /// Triples kept per observation turn.
    #[arg(long, global = true)]
    top_n: Option<usize>,
    /// Share of each turn's triples whose tails are expanded next, in (0, 100].
    #[arg(long, global = true)]
    refine_percent: Option<f64>,
    /// Most triples reflection may keep per step.
    #[arg(long, global = true)]
    k_max: Option<usize>,
    /// Seed mixed into random reflection.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Per-question time budget in seconds; 0 disables it.
    #[arg(long, global = true)]
    timeout_secs: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderKind {
    Live,
    Scripted,
}

#[derive(Args)]
struct Target {
    /// Directory holding triples.tsv and labels.tsv.
    #[arg(long, conflicts_with = "server", required_unless_present = "server")]
    kg: Option<PathBuf>,
    /// Base URL of a running `kgscout serve`.
    #[arg(long)]
    server: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Extract the k-hop subgraph around seed entities from a triple dump.
    BuildSubgraph {
        #[arg(long)]
        triples: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// One entity id per line.
        #[arg(long)]
        seeds: PathBuf,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the HTTP API and, optionally, the line protocol.
    Serve {
        #[arg(long)]
        kg: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Address for the NEIGHBORS/PATHS line protocol.
        #[arg(long)]
        lines_addr: Option<SocketAddr>,
    },
    /// Answer one question.
    Ask {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        question: String,
        /// Comma-separated seed entity ids.
        #[arg(long, value_delimiter = ',', required = true)]
        entities: Vec<String>,
        #[arg(long, value_enum)]
        provider: Option<ProviderKind>,
        #[arg(long)]
        script: Option<PathBuf>,
        #[arg(long)]
        strategy: Option<ReflectionStrategy>,
        /// Write the full trace as JSON here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Print the labeled transcript instead of only the answers.
        #[arg(long)]
        transcript: bool,
    },
    /// Run a dataset and write traces plus report.json.
    Eval {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        strategy: Option<ReflectionStrategy>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        provider: Option<ProviderKind>,
        #[arg(long)]
        script: Option<PathBuf>,
    },
    /// Show an entity's label and outgoing triples.
    Inspect {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        entity: String,
        #[arg(long)]
        limit: Option<usize>,
    },
}

fn load_settings(cli: &Cli) -> Result<(Settings, PathBuf)> {
    let (mut settings, base) = match &cli.config {
        Some(path) => (
            Settings::load(path)?,
            path.parent().map(Path::to_path_buf).unwrap_or_default(),
        ),
        None => (Settings::default(), PathBuf::from(".")),
    };
    let o = &cli.overrides;
    let a = &mut settings.agent;
    if let Some(v) = o.max_iterations {
        a.max_iterations = v;
    }
    if let Some(v) = o.depth_limit {
        a.observation.depth_limit = v;
    }
    if let Some(v) = o.top_n {
        a.observation.top_n = v;
    }
    if let Some(v) = o.refine_percent {
        a.observation.refine_percent = v;
    }
    if let Some(v) = o.k_max {
        a.reflection.k_max = v;
    }
    if let Some(v) = o.seed {
        a.seed = v;
    }
    if let Some(v) = o.timeout_secs {
        a.question_timeout_secs = v;
    }
    Ok((settings, base))
}

fn apply_provider(settings: &mut Settings, provider: Option<ProviderKind>, script: Option<PathBuf>) {
    if let Some(p) = provider {
        settings.llm.backend = match p {
            ProviderKind::Live => LlmBackend::Live,
            ProviderKind::Scripted => LlmBackend::Scripted,
        };
    }
    if let Some(s) = script {
        // Command-line paths are relative to the working directory.
        settings.llm.script = Some(std::path::absolute(&s).unwrap_or(s));
    }
}

fn load_kg(dir: &Path) -> Result<KnowledgeGraph> {
    KnowledgeGraph::load_dir(dir).with_context(|| format!("loading knowledge graph from {}", dir.display()))
}

fn parse_entities(raw: &[String]) -> Result<Vec<EntityId>> {
    raw.iter()
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| EntityId::new(s).with_context(|| format!("bad entity id {s:?}")))
        .collect()
}

fn read_seeds(path: &Path) -> Result<Vec<EntityId>> {
    let reader = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let id = line.trim();
        if id.is_empty() || id.starts_with('#') {
            continue;
        }
        let id = EntityId::new(id).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        if seen.insert(id.clone()) {
            out.push(id);
        }
    }
    Ok(out)
}

fn build_subgraph(triples: &Path, labels: Option<&Path>, seeds: &Path, k: usize, out: &Path) -> Result<()> {
    let seeds = read_seeds(seeds)?;
    let mut kg = KnowledgeGraph::new();
    let file = File::open(triples).with_context(|| format!("opening {}", triples.display()))?;
    kg.extend_triples(BufReader::new(file))
        .with_context(|| format!("reading {}", triples.display()))?;
    if let Some(labels) = labels {
        let file = File::open(labels).with_context(|| format!("opening {}", labels.display()))?;
        kg.load_labels(BufReader::new(file))
            .with_context(|| format!("reading {}", labels.display()))?;
    }
    let sub = kg.extract_khop_subgraph(seeds.iter(), k);
    sub.save_dir(out)?;
    eprintln!(
        "{} of {} triples within {k} hops of {} seeds written to {}",
        sub.len(),
        kg.len(),
        seeds.len(),
        out.display()
    );
    Ok(())
}

async fn serve(settings: &Settings, base: &Path, kg_dir: &Path, addr: SocketAddr, lines_addr: Option<SocketAddr>) -> Result<()> {
    let kg = load_kg(kg_dir)?;
    let providers = Providers::from_settings(settings, base)?;
    let mut state = AppState::new(kg, providers, settings.agent.clone());
    state.match_policy = settings.eval.match_policy;
    state.default_workers = settings.eval.workers;

    if let Some(addr) = lines_addr {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        tracing::info!(addr = %listener.local_addr()?, "line protocol listening");
        let kg = state.kg.clone();
        tokio::spawn(async move {
            if let Err(e) = kgscout_service::lines::serve_lines(listener, kg).await {
                tracing::error!(error = %e, "line protocol stopped");
            }
        });
    }
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "http listening");
    kgscout_service::serve_http(listener, state, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await?;
    Ok(())
}

fn print_answers(answers: &[String], halted_by: Option<agent::HaltReason>, error: Option<&str>) {
    if let Some(e) = error {
        eprintln!("error: {e}");
    }
    if let Some(h) = halted_by {
        eprintln!("halted by {}", serde_json::to_value(h).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default());
    }
    println!("{}", answers.join(", "));
}

async fn run(cli: Cli) -> Result<()> {
    let (mut settings, base) = load_settings(&cli)?;
    match cli.command {
        Command::BuildSubgraph {
            triples,
            labels,
            seeds,
            k,
            out,
        } => tokio::task::spawn_blocking(move || build_subgraph(&triples, labels.as_deref(), &seeds, k, &out)).await?,
        Command::Serve { kg, addr, lines_addr } => serve(&settings, &base, &kg, addr, lines_addr).await,
        Command::Ask {
            target,
            question,
            entities,
            provider,
            script,
            strategy,
            trace,
            transcript,
        } => {
            let entities = parse_entities(&entities)?;
            if entities.is_empty() {
                bail!("--entities needs at least one id");
            }
            if let Some(s) = strategy {
                settings.agent.reflection.strategy = s;
            }
            let (answers, halted_by, error, agent_trace, kg) = match (&target.kg, &target.server) {
                (_, Some(url)) => {
                    let reply = Client::new(url.as_str())?.ask(&question, &entities, strategy).await?;
                    (reply.answers, reply.halted_by, reply.error, reply.trace, None)
                }
                (Some(dir), None) => {
                    apply_provider(&mut settings, provider, script);
                    let kg = load_kg(dir)?;
                    let providers = Providers::from_settings(&settings, &base)?;
                    let config = settings.agent.clone();
                    let (kg, result) = tokio::task::spawn_blocking(move || {
                        let r = agent::run(&question, &entities, &kg, &providers, &config);
                        (kg, r)
                    })
                    .await?;
                    match result {
                        Ok(r) => (r.answers, Some(r.halted_by), None, r.trace, Some(kg)),
                        Err(f) => (Vec::new(), None, Some(f.error.to_string()), *f.trace, Some(kg)),
                    }
                }
                (None, None) => unreachable!("clap requires --kg or --server"),
            };
            if let Some(path) = trace {
                agent_trace.save(&path)?;
            }
            if transcript {
                let kg = kg.unwrap_or_default();
                print!("{}", render_case(&agent_trace, &kg));
            }
            print_answers(&answers, halted_by, error.as_deref());
            if error.is_some() {
                std::process::exit(2);
            }
            Ok(())
        }
        Command::Eval {
            target,
            dataset,
            strategy,
            workers,
            out,
            provider,
            script,
        } => {
            let records = load_dataset_file(&dataset).with_context(|| format!("loading {}", dataset.display()))?;
            if let Some(s) = strategy {
                settings.agent.reflection.strategy = s;
            }
            let workers = workers.unwrap_or(settings.eval.workers);
            let report = match (&target.kg, &target.server) {
                (_, Some(url)) => {
                    let report = Client::new(url.as_str())?.eval(records, strategy, Some(workers)).await?;
                    std::fs::create_dir_all(&out)?;
                    report.save(out.join("report.json"))?;
                    report
                }
                (Some(dir), None) => {
                    apply_provider(&mut settings, provider, script);
                    let kg = load_kg(dir)?;
                    let providers = Providers::from_settings(&settings, &base)?;
                    let config = settings.agent.clone();
                    let options = EvalOptions {
                        workers,
                        match_policy: settings.eval.match_policy,
                        out_dir: Some(out.clone()),
                    };
                    tokio::task::spawn_blocking(move || run_eval(&records, &kg, &providers, &config, &options)).await??
                }
                (None, None) => unreachable!("clap requires --kg or --server"),
            };
            println!(
                "{}/{} correct, accuracy {:.4}{} ({} errors); report in {}",
                report.hits,
                report.total,
                report.accuracy,
                if report.empty { " (empty dataset)" } else { "" },
                report.errors,
                out.join("report.json").display()
            );
            Ok(())
        }
        Command::Inspect { target, entity, limit } => {
            let report = match (&target.kg, &target.server) {
                (_, Some(url)) => Client::new(url.as_str())?.inspect(&entity, limit).await?,
                (Some(dir), None) => {
                    let kg = load_kg(dir)?;
                    EntityReport::build(&kg, &EntityId::new(entity.as_str())?, limit)
                }
                (None, None) => unreachable!("clap requires --kg or --server"),
            };
            print!("{}", report.render());
            Ok(())
        }
    }
}

fn main() -> Result<()> {
    let level = std::env::var("KGSCOUT_LOG")
        .ok()
        .and_then(|v| v.parse::<tracing::Level>().ok())
        .unwrap_or(tracing::Level::INFO);
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(run(cli))
}
