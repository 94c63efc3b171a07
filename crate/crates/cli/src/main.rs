//! `toolplay`: optimize tool-use examples and documentation, evaluate the
//! result, and replay recorded runs.
//!
//! Exit codes: 0 success, 2 when some tools failed, were skipped or were
//! unplayable, 1 on fatal errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use toolplay::llm::{MockScript, PromptLibrary};
use toolplay::pipeline::{
    noise_registry, noised_path, replay, write_atomic, BackendSource, Pipeline, RunConfig, RunDir, RunManifest,
    StageSummary,
};
use toolplay::registry::ToolRegistry;

#[derive(Parser, Debug)]
#[command(name = "toolplay", version, about = "Tool documentation and example optimizer")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Tool registry (JSON).
    #[arg(long, global = true)]
    registry: Option<PathBuf>,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory, or the output file for `noise`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// OpenAI-compatible endpoint; the key is read from TOOLPLAY_API_KEY.
    #[arg(long, global = true, env = "TOOLPLAY_BACKEND_URL")]
    backend_url: Option<String>,
    /// Scripted mock backend (JSON). Takes precedence over --backend-url.
    #[arg(long, global = true)]
    mock_script: Option<PathBuf>,
    /// Directory of prompt template overrides (`m1.txt`, ...).
    #[arg(long, global = true)]
    prompts: Option<PathBuf>,
    /// Tools processed in parallel; overrides the configuration.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Search for tool-use examples for each selected tool.
    OptimizeExamples {
        /// Tool ids or names; defaults to the configuration's list, then all tools.
        #[arg(long, value_delimiter = ',')]
        tools: Vec<String>,
    },
    /// Refine documentation, scored against the example artifacts.
    OptimizeDocs {
        #[arg(long, value_delimiter = ',')]
        tools: Vec<String>,
    },
    /// Compare original and optimized prompts on a queries file (JSON lines).
    Evaluate {
        #[arg(long)]
        queries: PathBuf,
    },
    /// Write a copy of the registry with parameter descriptions dropped.
    Noise {
        /// Drop probability per parameter.
        #[arg(long)]
        p: f64,
    },
    /// Re-run a mock-backend run and compare every artifact byte for byte.
    Replay {
        /// Where the re-run goes; a temporary directory when omitted.
        #[arg(long)]
        scratch: Option<PathBuf>,
    },
}

#[derive(Debug)]
struct Fatal(String);

impl<E: std::fmt::Display> From<E> for Fatal {
    fn from(err: E) -> Self {
        Fatal(err.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(Fatal(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<u8, Fatal> {
    let g = &cli.global;
    match &cli.command {
        Command::Noise { p } => {
            let registry_path = require(&g.registry, "--registry")?;
            let seed = g.seed.ok_or_else(|| Fatal("noise needs --seed".into()))?;
            let registry = ToolRegistry::load(registry_path)?;
            let text = noise_registry(&registry, *p, seed)?;
            let out = g.out.clone().unwrap_or_else(|| noised_path(registry_path, *p, seed));
            write_atomic(&out, text.as_bytes())?;
            println!("{}", out.display());
            Ok(0)
        }
        Command::Replay { scratch } => {
            let original = require(&g.out, "--out")?;
            let library = library(g)?;
            let temp;
            let scratch = match scratch {
                Some(dir) => dir.clone(),
                None => {
                    temp = tempfile::tempdir()?;
                    temp.path().join("replay")
                }
            };
            let checks = replay(original, &scratch, &library)?;
            let mut all = true;
            for check in &checks {
                println!("{} {}", if check.identical { "same" } else { "DIFF" }, check.path);
                all &= check.identical;
            }
            println!("{} of {} artifacts identical", checks.iter().filter(|c| c.identical).count(), checks.len());
            Ok(if all { 0 } else { 1 })
        }
        Command::OptimizeExamples { tools } => with_pipeline(g, |p| stage(p.optimize_examples(tools)?)),
        Command::OptimizeDocs { tools } => with_pipeline(g, |p| stage(p.optimize_docs(tools)?)),
        Command::Evaluate { queries } => with_pipeline(g, |p| {
            let text = std::fs::read_to_string(queries).map_err(|e| Fatal(format!("{}: {e}", queries.display())))?;
            let report = p.evaluate(&text)?;
            print!("{}", report.render_table());
            let flagged = report
                .baseline
                .queries
                .iter()
                .chain(&report.optimized.queries)
                .filter(|q| q.error.is_some())
                .count();
            if flagged > 0 {
                eprintln!("{flagged} query runs failed and were scored 0");
                return Ok(2);
            }
            Ok(0)
        }),
    }
}

fn stage(summary: StageSummary) -> Result<u8, Fatal> {
    print!("{}", summary.render());
    Ok(summary.exit_code() as u8)
}

fn require<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Fatal> {
    value.as_deref().ok_or_else(|| Fatal(format!("missing {flag}")))
}

fn library(g: &Global) -> Result<PromptLibrary, Fatal> {
    Ok(match &g.prompts {
        Some(dir) => PromptLibrary::with_overrides(dir)?,
        None => PromptLibrary::default(),
    })
}

fn load_config(g: &Global) -> Result<RunConfig, Fatal> {
    let mut table = match &g.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Fatal(format!("{}: {e}", path.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| Fatal(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    if let Some(seed) = g.seed {
        let seed = i64::try_from(seed).map_err(|_| Fatal("--seed must fit in a signed 64-bit integer".into()))?;
        table.insert("seed".into(), toml::Value::Integer(seed));
    }
    if !table.contains_key("seed") {
        return Err(Fatal("a seed is required: set `seed` in --config or pass --seed".into()));
    }
    if let Some(jobs) = g.jobs {
        table.insert("jobs".into(), toml::Value::Integer(jobs as i64));
    }
    let config: RunConfig = toml::Value::Table(table).try_into()?;
    config.validate()?;
    Ok(config)
}

fn backend(g: &Global) -> Result<BackendSource, Fatal> {
    if let Some(path) = &g.mock_script {
        let text = std::fs::read_to_string(path).map_err(|e| Fatal(format!("{}: {e}", path.display())))?;
        let script = MockScript::from_json(&text).map_err(|e| Fatal(format!("{}: {e}", path.display())))?;
        return Ok(BackendSource::Mock { script });
    }
    match &g.backend_url {
        Some(url) => Ok(BackendSource::OpenAi { base_url: url.clone() }),
        None => Err(Fatal("no backend: pass --mock-script or --backend-url".into())),
    }
}

fn with_pipeline(g: &Global, body: impl FnOnce(&Pipeline<'_>) -> Result<u8, Fatal>) -> Result<u8, Fatal> {
    let registry = ToolRegistry::load(require(&g.registry, "--registry")?)?;
    let config = load_config(g)?;
    let backend = backend(g)?;
    let library = library(g)?;
    let out = require(&g.out, "--out")?;
    let dir = RunDir::open(out, RunManifest::new(&config, &backend, &registry))?;
    let pipeline = Pipeline {
        config: &config,
        registry: &registry,
        backend: &backend,
        library: &library,
        dir: &dir,
    };
    body(&pipeline)
}
