//! `lithe`: rewrite single queries, run workloads, check equivalence and
//! build sample databases.
//!
//! Exit codes: 0 success, 1 partial failure (a query errored, a rewrite
//! failed, or a pair was not shown equivalent), 2 configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use lithe_core::bench::{rewrite_query, run_benchmark, BenchMode, Workload};
use lithe_core::config::Config;
use lithe_core::db::{Engine, PgDatabase};
use lithe_core::equiv::{
    correlated_sample, orphan_count, CheckDepth, EquivalenceOracle, SampledChecker,
};
use lithe_core::exec::Executor;
use lithe_core::llm::{BackendKind, LlmGateway};
use lithe_core::pipeline::RewriteContext;
use lithe_core::prompts::PromptLibrary;
use lithe_core::sql::parse;

#[derive(Parser, Debug)]
#[command(name = "lithe", version, about = "LLM-driven SQL query rewriting")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Rewrite strategy: ensemble, ensemble+mcts or classifier+mcts.
    #[arg(long, global = true)]
    mode: Option<BenchMode>,
    /// Pick one rule with the classifier before searching.
    #[arg(long, global = true)]
    use_classifier: bool,
    /// Also compare results on the full database after sampling passes.
    #[arg(long, global = true)]
    verify_full: bool,
    /// Directory with prompt templates and rule examples.
    #[arg(long, global = true)]
    prompt_dir: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    llm_backend: Option<Backend>,
    /// Sample seeds, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Write the machine-readable result here.
    #[arg(long, global = true)]
    json_out: Option<PathBuf>,
    /// Queries processed concurrently.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rewrite one query.
    Rewrite { file: PathBuf },
    /// Run a workload manifest and report PR, MPR and SpeedupGM.
    Bench { manifest: PathBuf },
    /// Check two queries for equivalence.
    Equiv { first: PathBuf, second: PathBuf },
    /// Build one seeded sample of a schema per seed and keep it.
    Sample { schema: String },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Backend {
    Scripted,
    Remote,
}

enum Failure {
    Config(anyhow::Error),
    Run(anyhow::Error),
}

trait OrConfig<T> {
    fn or_config(self, what: &str) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> OrConfig<T> for Result<T, E> {
    fn or_config(self, what: &str) -> Result<T, Failure> {
        self.map_err(|e| Failure::Config(e.into().context(what.to_string())))
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Config(e)) => {
            eprintln!("configuration error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Effective configuration: the file (or defaults) overridden by flags.
fn load_config(cli: &Cli) -> Result<Config, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => Config::from_file(p).or_config("loading configuration")?,
        None => Config::default(),
    };
    if let Some(b) = cli.llm_backend {
        cfg.llm.backend = match b {
            Backend::Scripted => BackendKind::Scripted,
            Backend::Remote => BackendKind::Remote,
        };
    }
    if let Some(seeds) = &cli.seeds {
        cfg.equiv.seeds = seeds.clone();
    }
    if cli.verify_full {
        cfg.equiv.full_db = true;
    }
    if let Some(j) = cli.jobs {
        cfg.bench.jobs = j;
    }
    if let Some(m) = cli.mode {
        cfg.bench.mode = m;
    }
    if cli.use_classifier {
        if cli.mode.is_some_and(|m| m != BenchMode::ClassifierMcts) {
            return Err(Failure::Config(anyhow!(
                "--use-classifier conflicts with --mode {}",
                cfg.bench.mode
            )));
        }
        cfg.bench.mode = BenchMode::ClassifierMcts;
    }
    cfg.validate().or_config("checking configuration")?;
    Ok(cfg)
}

fn connect(cfg: &Config) -> Result<Arc<PgDatabase>, Failure> {
    let db = cfg
        .db
        .clone()
        .with_env_overrides()
        .or_config("database settings")?;
    let name = db.dbname.clone();
    PgDatabase::connect(db)
        .map(Arc::new)
        .or_config(&format!("connecting to database {name}"))
}

fn context(cli: &Cli, cfg: &Config, db: Arc<PgDatabase>) -> Result<RewriteContext, Failure> {
    let llm =
        LlmGateway::from_config(cfg.llm.clone()).or_config("setting up the language model")?;
    let checker = SampledChecker::new(db.clone(), cfg.equiv.clone())
        .or_config("setting up equivalence checks")?;
    let mut ctx = RewriteContext::new(db, llm, Arc::new(checker))
        .with_executor(Executor::with_jobs(cfg.bench.jobs));
    if let Some(dir) = &cli.prompt_dir {
        ctx = ctx.with_prompts(PromptLibrary::from_dir(dir).or_config("loading prompts")?);
    }
    Ok(ctx)
}

fn read_query(path: &Path) -> Result<lithe_core::sql::SqlQuery, Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Config)?;
    parse(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(Failure::Config)
}

fn write_json(cli: &Cli, json: &str) -> Result<(), Failure> {
    if let Some(p) = &cli.json_out {
        std::fs::write(p, json).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<bool, Failure> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Rewrite { file } => {
            let query = read_query(file)?;
            let ctx = context(cli, &cfg, connect(&cfg)?)?;
            let out =
                rewrite_query(&ctx, &query, cfg.bench.mode, &cfg.mcts).map_err(|e| anyhow!(e))?;
            write_json(
                cli,
                &serde_json::to_string_pretty(&out).context("serializing outcome")?,
            )?;
            println!("{}", out.result.text());
            eprintln!(
                "{:?}: cost {:.2} -> {:.2} ({:.2}x) via {}, {} tokens in {} calls",
                out.reason,
                out.original_cost,
                out.result_cost,
                out.speedup(),
                out.chosen_prompt.map_or("none", |p| p.as_str()),
                out.usage.total_tokens(),
                out.usage.calls
            );
            for d in &out.diagnostics {
                eprintln!("  {d}");
            }
            Ok(true)
        }
        Command::Bench { manifest } => {
            let w = Workload::load(manifest).or_config("loading workload")?;
            let mut cfg = cfg;
            if let Some(db) = &w.spec.db {
                cfg.db = db.clone();
            }
            let ctx = context(cli, &cfg, connect(&cfg)?)?;
            let report = run_benchmark(&w, cfg.bench.mode, &ctx, &cfg.mcts);
            write_json(cli, &report.to_json())?;
            print!("{}", report.to_text());
            Ok(report.aggregates.errors == 0)
        }
        Command::Equiv { first, second } => {
            let (a, b) = (read_query(first)?, read_query(second)?);
            let db = connect(&cfg)?;
            let checker = SampledChecker::new(db, cfg.equiv.clone())
                .or_config("setting up equivalence checks")?;
            let v = checker.check(&a, &b, CheckDepth::Full);
            let json = serde_json::to_string_pretty(&v).context("serializing verdict")?;
            write_json(cli, &json)?;
            println!("{json}");
            Ok(v.status.accepts())
        }
        Command::Sample { schema } => {
            let mut cfg = cfg;
            cfg.db.schema = schema.clone();
            let db = connect(&cfg)?;
            let catalog = db.fetch_schema(None).context("reading the schema")?;
            if catalog.tables.is_empty() {
                return Err(Failure::Config(anyhow!("schema {schema} has no tables")));
            }
            let mut samples = Vec::new();
            for &seed in &cfg.equiv.seeds {
                let name = format!("lithe_sample_{seed}_{}", std::process::id());
                let s = correlated_sample(
                    db.as_ref(),
                    &catalog,
                    cfg.equiv.sample_fraction,
                    cfg.equiv.max_sample_rows,
                    seed,
                    &name,
                )
                .with_context(|| format!("sampling with seed {seed}"))?;
                let orphans = orphan_count(db.as_ref(), &s, &catalog).context("checking joins")?;
                println!("seed {seed}: {name} ({orphans} orphan rows)");
                for (table, f) in &s.row_fractions {
                    println!("  {table:<24} {:>6.1}%", f * 100.0);
                }
                samples.push(s);
            }
            write_json(
                cli,
                &serde_json::to_string_pretty(&samples).context("serializing samples")?,
            )?;
            Ok(true)
        }
    }
}
