//! `planexec`: ingest a corpus, ask one question, run benchmarks and sweeps.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use planexec::config::{parse_tools, AppConfig};
use planexec::eval::{
    load_dataset, load_records, run_benchmark, sweep, BenchOptions, EvalError, ModelSource, Report, ScriptSource,
    SharedModel, SweepParam, REPORT_FILE,
};
use planexec::gateway::{ChatModel, HttpGateway, ScriptedModel};
use planexec::pipeline::Mode;
use planexec::prompts::PromptAssets;
use planexec::retrieval::{
    ingest_dump, read_documents, Bm25Index, CrossModalIndex, EmbeddingProvider, HttpEmbeddingProvider,
};
use planexec::sandbox::{SnippetExecutor, SubprocessSandbox};
use planexec::{Pipeline, Resources, TaskInput};

#[derive(Parser)]
#[command(name = "planexec", version, about = "Plan / execute / synthesize agent for visual question answering")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    max_turns: Option<usize>,
    #[arg(long, global = true)]
    top_k: Option<usize>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Comma-separated tool pool, e.g. `search,code`.
    #[arg(long, global = true)]
    tools: Option<String>,
    /// Worker threads for bench and sweep.
    #[arg(long, global = true, default_value_t = 1)]
    concurrency: usize,
    /// Replay scripted model replies instead of calling an endpoint: a JSON
    /// file, or a directory of `<example id>.json` files for bench/sweep.
    #[arg(long, global = true)]
    mock_script: Option<PathBuf>,
    /// `agent` (default) or `direct` (one call, no tools).
    #[arg(long, global = true)]
    mode: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Filter, chunk and index an NDJSON dump of `{id, title, text}` documents.
    Ingest {
        dump: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Answer one question and write its trace.
    Ask {
        question: String,
        #[arg(long)]
        image: Option<String>,
        /// Comma-separated answer options.
        #[arg(long)]
        options: Option<String>,
        /// Run directory; defaults to `runs/ask-<timestamp>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a JSONL dataset and write records, traces and a report.
    Bench {
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the benchmark once per value of `top_k` or `max_turns`.
    Sweep {
        dataset: PathBuf,
        #[arg(long)]
        param: String,
        /// Comma-separated values, or a range like `1..10` (inclusive).
        #[arg(long)]
        values: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize the records of a previous bench run.
    Report { run_dir: PathBuf },
}

/// Usage errors exit with 2, everything else with 1.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn require_path(path: &Path) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(anyhow!("path not found: {}", path.display())))
    }
}

fn parse_values(s: &str) -> Result<Vec<usize>, Failure> {
    let bad = || usage(anyhow!("invalid --values '{s}'"));
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|v| v.trim().parse().map_err(|_| bad())).collect()
}

fn load_config(common: &Common) -> Result<AppConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            require_path(path)?;
            AppConfig::load(path).map_err(usage)?
        }
        None => {
            let mut c = AppConfig::default();
            c.apply_env(|k| std::env::var(k).ok());
            c
        }
    };
    if let Some(v) = common.max_turns {
        cfg.agent.max_turns = v;
    }
    if let Some(v) = common.top_k {
        cfg.retrieval.top_k = v;
    }
    if let Some(v) = common.tau {
        cfg.retrieval.tau = v;
    }
    if let Some(t) = &common.tools {
        parse_tools(&[t]).map_err(usage)?;
        cfg.agent.tools = t.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    }
    if let Some(m) = &common.mode {
        cfg.agent.mode = match m.as_str() {
            "agent" => Mode::Agent,
            "direct" => Mode::Direct,
            other => return Err(usage(anyhow!("unknown --mode '{other}' (expected agent or direct)"))),
        };
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn embedder(cfg: &AppConfig) -> Option<Arc<dyn EmbeddingProvider>> {
    cfg.index.embedding_endpoint.as_ref().map(|e| {
        Arc::new(HttpEmbeddingProvider::new(e.clone(), Duration::from_secs_f64(cfg.gateway.timeout_secs)))
            as Arc<dyn EmbeddingProvider>
    })
}

fn resources(cfg: &AppConfig) -> Result<Resources, Failure> {
    let mut res = Resources::default();
    if let Some(dir) = &cfg.prompts_dir {
        res.prompts = Arc::new(PromptAssets::with_overrides(dir).map_err(usage)?);
    }
    if let Some(dir) = &cfg.index.dir {
        let index = Bm25Index::load(dir).map_err(usage)?;
        if let Some(provider) = embedder(cfg) {
            res.image_index = Some(Arc::new(CrossModalIndex::new(index.passages().to_vec(), Some(provider))));
        }
        res.text_index = Some(Arc::new(index));
    }
    if !cfg.sandbox.runner.is_empty() {
        let sb = SubprocessSandbox::new(cfg.sandbox.runner.clone(), cfg.sandbox.max_concurrent).map_err(usage)?;
        res.sandbox = Some(Arc::new(sb) as Arc<dyn SnippetExecutor>);
    }
    Ok(res)
}

fn model_source(common: &Common, cfg: &AppConfig) -> Result<Box<dyn ModelSource>, Failure> {
    if let Some(path) = &common.mock_script {
        require_path(path)?;
        return Ok(Box::new(ScriptSource::from_path(path)));
    }
    match cfg.gateway_config().map_err(usage)? {
        Some(g) => Ok(Box::new(SharedModel(Arc::new(HttpGateway::new(g))))),
        None => Err(usage(anyhow!(
            "no model configured: set gateway.endpoint and gateway.model (or PLANEXEC_ENDPOINT / PLANEXEC_MODEL), or pass --mock-script"
        ))),
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn cmd_ingest(cfg: &AppConfig, dump: &Path, out: &Path) -> Result<(), Failure> {
    require_path(dump)?;
    let docs = read_documents(dump)?;
    let provider = embedder(cfg);
    let r = &cfg.retrieval;
    let (index, report) = ingest_dump(docs, r.chunk_size, r.chunk_overlap, r.bm25_params(), provider.as_deref())?;
    index.save(out)?;
    write_json(&out.join("ingest_config.json"), &cfg.snapshot())?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_ask(
    common: &Common,
    cfg: &AppConfig,
    question: &str,
    image: Option<&str>,
    options: Option<&str>,
    out: Option<&Path>,
) -> Result<(), Failure> {
    if let Some(img) = image {
        if !img.contains("://") {
            require_path(Path::new(img))?;
        }
    }
    let model: Arc<dyn ChatModel> = match &common.mock_script {
        Some(path) => {
            require_path(path)?;
            Arc::new(ScriptedModel::from_file(path).map_err(usage)?)
        }
        None => match cfg.gateway_config().map_err(usage)? {
            Some(g) => Arc::new(HttpGateway::new(g)),
            None => return Err(usage(anyhow!("no model configured: set gateway.endpoint or pass --mock-script"))),
        },
    };
    let settings = cfg.pipeline_settings().map_err(usage)?;
    let pipeline = Pipeline::new(settings, resources(cfg)?);

    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default().as_millis();
    let dir = out.map_or_else(|| PathBuf::from(format!("runs/ask-{stamp}")), Path::to_path_buf);
    std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    write_json(&dir.join("config.json"), &cfg.snapshot())?;

    let mut task = TaskInput::new(format!("ask-{stamp}"), question);
    if let Some(img) = image {
        task = task.with_image(img);
    }
    if let Some(opts) = options {
        task = task.with_options(opts.split(',').map(str::trim));
    }
    let log = pipeline.run(&task, model.as_ref())?;
    let trace_path = dir.join("trace.json");
    std::fs::write(&trace_path, log.to_json()).with_context(|| format!("cannot write {}", trace_path.display()))?;
    println!("{}", log.answer.text);
    eprintln!("trace: {}", trace_path.display());
    Ok(())
}

fn print_report(report: &Report) {
    print!("{}", report.render_table());
}

fn cmd_bench(common: &Common, cfg: &AppConfig, dataset: &Path, out: &Path) -> Result<(), Failure> {
    require_path(dataset)?;
    let examples = load_dataset(dataset).map_err(usage)?;
    let models = model_source(common, cfg)?;
    let pipeline = Pipeline::new(cfg.pipeline_settings().map_err(usage)?, resources(cfg)?);
    let opts = BenchOptions {
        concurrency: common.concurrency.max(1),
        out_dir: Some(out.to_path_buf()),
        config_snapshot: cfg.snapshot(),
    };
    let (report, _) = run_benchmark(&examples, &pipeline, models.as_ref(), &opts)?;
    print_report(&report);
    eprintln!("report: {}", out.join(REPORT_FILE).display());
    Ok(())
}

fn cmd_sweep(common: &Common, cfg: &AppConfig, dataset: &Path, param: &str, values: &str, out: &Path) -> Result<(), Failure> {
    require_path(dataset)?;
    let param: SweepParam = param.parse().map_err(|e: String| usage(anyhow!(e)))?;
    let values = parse_values(values)?;
    if values.iter().any(|v| *v == 0) {
        return Err(usage(anyhow!("{} values must be at least 1", param.name())));
    }
    let examples = load_dataset(dataset).map_err(usage)?;
    let models = model_source(common, cfg)?;
    let settings = cfg.pipeline_settings().map_err(usage)?;
    let opts = BenchOptions {
        concurrency: common.concurrency.max(1),
        out_dir: Some(out.to_path_buf()),
        config_snapshot: cfg.snapshot(),
    };
    let rows = sweep(param, &values, &examples, &settings, &resources(cfg)?, models.as_ref(), &opts)?;
    println!("{:<10} accuracy  avg_turns  latency_p50 (s)", param.name());
    for (v, r) in &rows {
        println!("{v:<10} {:<9.3} {:<10.2} {:.3}", r.accuracy, r.avg_turns, r.latency_p50.as_secs_f64());
    }
    eprintln!("csv: {}", out.join("sweep.csv").display());
    Ok(())
}

fn cmd_report(run_dir: &Path) -> Result<(), Failure> {
    require_path(run_dir)?;
    let (records, config) = match load_records(run_dir) {
        Err(EvalError::NoRecords(p)) => return Err(Failure::Runtime(anyhow!("no run records found in {}", p.display()))),
        other => other?,
    };
    print_report(&Report::from_records(&records, config)?);
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let common = &cli.common;
    if let Command::Report { run_dir } = &cli.command {
        return cmd_report(run_dir);
    }
    let cfg = load_config(common)?;
    match &cli.command {
        Command::Ingest { dump, out } => cmd_ingest(&cfg, dump, out),
        Command::Ask { question, image, options, out } => {
            cmd_ask(common, &cfg, question, image.as_deref(), options.as_deref(), out.as_deref())
        }
        Command::Bench { dataset, out } => cmd_bench(common, &cfg, dataset, out),
        Command::Sweep { dataset, param, values, out } => cmd_sweep(common, &cfg, dataset, param, values, out),
        Command::Report { .. } => unreachable!(),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
