use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};
use vmx_core::corpus::load_corpus;
use vmx_core::gateway::live::LiveBackend;
use vmx_core::gateway::scripted::{Ruleset, ScriptedBackend};
use vmx_core::gateway::{Backend, BackendKind};
use vmx_core::graph::{self, task_slug};
use vmx_core::pipeline::{PipelineError, RunReport};
use vmx_core::{run_pipeline, Gateway, GatewayConfig, PipelineConfig, Stage};

const EXIT_VALIDATION: u8 = 2;
const EXIT_STAGE: u8 = 3;

#[derive(Parser)]
#[command(name = "vmx", version, about = "Mine task graphs from how-to video corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load and validate a corpus manifest.
    Ingest { manifest: PathBuf },
    /// Run the pipeline for one task and write its graph.
    Run(RunArgs),
    /// Check a graph file's schema and internal consistency.
    Validate {
        graph: PathBuf,
        /// Also check video references against this corpus.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Print the report of a run directory (or its report.json).
    Report {
        run: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Serve the graph directory over HTTP.
    Serve {
        #[arg(long, default_value = "graphs")]
        graphs: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Allowed browser origin; any origin when unset.
        #[arg(long)]
        cors_origin: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Live,
    Scripted,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    task: String,
    /// Defaults to data/<task-slug>/manifest.json.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "live")]
    backend: BackendArg,
    /// Ruleset for the scripted backend.
    #[arg(long)]
    script: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    min_support: Option<usize>,
    /// Comma-separated subset of outcomes,dai,requirements,methods.
    #[arg(long, value_delimiter = ',')]
    stages: Vec<Stage>,
    #[arg(long, default_value = "graphs")]
    out: PathBuf,
    #[arg(long, default_value = "runs")]
    runs: PathBuf,
    /// Reuse matching stage checkpoints.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    model: Option<String>,
    /// Live backend calls per minute.
    #[arg(long)]
    rate_limit: Option<u32>,
    #[arg(long)]
    max_retries: Option<u32>,
}

/// Failure carrying its process exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure { code: 1, error }
    }
}

fn fail(code: u8, error: impl Into<anyhow::Error>) -> Failure {
    Failure { code, error: error.into() }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest { manifest } => ingest(&manifest),
        Command::Run(args) => run(args),
        Command::Validate { graph, manifest } => validate(&graph, manifest.as_deref()),
        Command::Report { run, json } => report(&run, json),
        Command::Serve { graphs, port, cors_origin } => serve(graphs, port, cors_origin),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn ingest(manifest: &Path) -> Result<(), Failure> {
    let (corpus, report) = load_corpus(manifest).map_err(|e| fail(EXIT_VALIDATION, e))?;
    println!("task: {}", corpus.task_name);
    println!("ingested: {}", report.ingested);
    println!("degraded (no frames): {}", report.degraded.len());
    for id in &report.degraded {
        println!("  {id}");
    }
    println!("failed: {}", report.failures.len());
    for f in &report.failures {
        println!("  {f:?}");
    }
    Ok(())
}

fn build_backend(args: &RunArgs, config: &GatewayConfig) -> anyhow::Result<(Arc<dyn Backend>, String)> {
    match args.backend {
        BackendArg::Scripted => {
            let (ruleset, digest) = match &args.script {
                Some(path) => {
                    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                    let rules = Ruleset::from_json(&text).map_err(|e| anyhow!("{}: {e}", path.display()))?;
                    (rules, hex::encode(Sha256::digest(text.as_bytes())))
                }
                None => (Ruleset::default(), "default".to_string()),
            };
            Ok((Arc::new(ScriptedBackend::new(ruleset)), format!("scripted:{digest}")))
        }
        BackendArg::Live => {
            if args.script.is_some() {
                bail!("--script only applies to the scripted backend");
            }
            let backend = LiveBackend::from_env(config).map_err(|e| anyhow!(e))?;
            let fingerprint = format!("live:{}:{}", config.model_name, config.temperature);
            Ok((Arc::new(backend), fingerprint))
        }
    }
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let manifest = args
        .manifest
        .clone()
        .unwrap_or_else(|| PathBuf::from("data").join(task_slug(&args.task)).join("manifest.json"));
    let (corpus, ingest) = load_corpus(&manifest).map_err(|e| fail(EXIT_VALIDATION, e))?;
    if corpus.task_name != args.task && task_slug(&corpus.task_name) != args.task {
        return Err(fail(
            EXIT_VALIDATION,
            anyhow!("manifest is for task {:?}, not {:?}", corpus.task_name, args.task),
        ));
    }
    for f in &ingest.failures {
        tracing::warn!(failure = ?f, "video skipped at ingest");
    }

    let mut gw_config = GatewayConfig {
        backend: match args.backend {
            BackendArg::Live => BackendKind::Live,
            BackendArg::Scripted => BackendKind::Scripted,
        },
        ..GatewayConfig::default()
    };
    if let Some(m) = &args.model {
        gw_config.model_name = m.clone();
    }
    if let Some(r) = args.rate_limit {
        gw_config.rate_limit = r;
    }
    if let Some(r) = args.max_retries {
        gw_config.max_retries = r;
    }
    let (backend, fingerprint) = build_backend(&args, &gw_config)?;
    let gateway = Gateway::new(backend, gw_config).map_err(|e| anyhow!(e))?;

    let config = PipelineConfig {
        min_support: args.min_support,
        seed: args.seed,
        stages: if args.stages.is_empty() {
            Stage::ALL.into_iter().collect()
        } else {
            args.stages.iter().copied().collect::<BTreeSet<_>>()
        },
        workers: args.workers,
        runs_dir: Some(args.runs.clone()),
        resume: args.resume,
        backend_fingerprint: fingerprint,
    };
    let outcome = run_pipeline(&corpus, &gateway, &config).map_err(|e| match e {
        PipelineError::Stage { .. } => fail(EXIT_STAGE, e),
        PipelineError::Consistency(_) => fail(EXIT_VALIDATION, e),
        other => fail(1, other),
    })?;

    let path = args.out.join(format!("{}.json", task_slug(&corpus.task_name)));
    graph::save(&outcome.graph, &path).map_err(|e| anyhow!(e))?;
    println!("graph: {}", path.display());
    println!("outcome clusters: {}", outcome.graph.outcome_clusters.len());
    println!("flags: {}", outcome.graph.pipeline_report.flags.len());
    println!("wall time: {:.3}s", outcome.report.wall_time_s);
    Ok(())
}

fn validate(path: &Path, manifest: Option<&Path>) -> Result<(), Failure> {
    let g = graph::load(path).map_err(|e| fail(EXIT_VALIDATION, e))?;
    let corpus = match manifest {
        Some(m) => Some(load_corpus(m).map_err(|e| fail(EXIT_VALIDATION, e))?.0),
        None => None,
    };
    graph::validate(&g, corpus.as_ref()).map_err(|e| fail(EXIT_VALIDATION, e))?;
    let bytes = fs::read(path).map_err(|e| anyhow!(e))?;
    if bytes != g.to_canonical_string().into_bytes() {
        return Err(fail(EXIT_VALIDATION, anyhow!("{} is not in canonical form", path.display())));
    }
    println!("ok: {} ({} outcome clusters)", g.task_name, g.outcome_clusters.len());
    Ok(())
}

fn report(run: &Path, json: bool) -> Result<(), Failure> {
    let report = RunReport::load(run).map_err(|e| anyhow!(e))?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report).map_err(|e| anyhow!(e))?);
        return Ok(());
    }
    let s = &report.summary;
    println!("task: {} ({})", report.task_name, report.task_slug);
    println!("seed: {}", s.seed);
    println!("videos ingested: {}", s.videos_ingested);
    println!("videos clustered: {}", s.clustered_videos);
    println!("{:<14}{:>9}{:>9}{:>10}", "stage", "flagged", "excluded", "time (s)");
    for stage in &s.stages {
        println!(
            "{:<14}{:>9}{:>9}{:>10.3}",
            stage.as_str(),
            s.flagged.get(stage).copied().unwrap_or(0),
            s.exclusions.get(stage).copied().unwrap_or(0),
            report.stage_wall_time_s.get(stage).copied().unwrap_or(0.0),
        );
    }
    if !report.resumed.is_empty() {
        let names: Vec<&str> = report.resumed.iter().map(|s| s.as_str()).collect();
        println!("resumed from checkpoint: {}", names.join(", "));
    }
    println!("model calls:");
    for (template, n) in &s.call_counts {
        println!("  {:<18}{n:>6}", template.as_str());
    }
    println!("wall time: {:.3}s", report.wall_time_s);
    Ok(())
}

fn serve(graphs: PathBuf, port: u16, cors_origin: Option<String>) -> Result<(), Failure> {
    if !graphs.is_dir() {
        return Err(anyhow!("graphs directory {} does not exist", graphs.display()).into());
    }
    let config = vmx_service::ServiceConfig {
        graphs_dir: graphs,
        cors_origin,
    };
    let rt = tokio::runtime::Runtime::new().map_err(|e| anyhow!(e))?;
    rt.block_on(vmx_service::serve(config, port)).map_err(|e| anyhow!(e))?;
    Ok(())
}
