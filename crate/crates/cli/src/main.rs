//! `multiblock`: run, resume and inspect architecture searches.

use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use multiblock_core::analysis::{self, AnalysisError, Query};
use multiblock_core::arch::{build_with, export_graph, summarize, ArchError, BuildOptions, PoolRounding, TensorShape};
use multiblock_core::catalog::{catalog, Catalog, CatalogError};
use multiblock_core::harness::{read_jsonl, ConfigFile, DbRow, EvaluatorConfig, HarnessError, Search, SearchConfig};
use multiblock_core::reward::wire::encode_response;
use multiblock_core::reward::{serve_oracle, EvalRequest, Evaluator, ExternalEvaluator, SimulatedEvaluator};
use multiblock_core::space::{decode_net, encode_net, SearchSpace, SpaceError};

#[derive(Parser)]
#[command(name = "multiblock", version, about = "Q-learning search over multi-block CNN architectures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start a new search.
    Run(RunArgs),
    /// Continue an interrupted search.
    Resume {
        /// Checkpoint file or run directory.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// List or count every network in the search space.
    Enumerate {
        #[arg(long, default_value_t = 5)]
        max_depth: u32,
        #[arg(long)]
        count_only: bool,
    },
    /// Score one network.
    Eval(EvalArgs),
    /// Reports over a replay DB.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Build a network and print its layer summary.
    Graph(GraphArgs),
    /// Serve the simulated oracle over the trainer wire protocol.
    ServeOracle {
        #[arg(long, default_value = "127.0.0.1:5555")]
        bind: String,
        /// Config file supplying oracle keys.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args, Default)]
struct Overrides {
    /// Config file; flags given here take precedence over its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["simulated", "external"])]
    evaluator: Option<String>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    timeout_secs: Option<f64>,
    #[arg(long)]
    max_depth: Option<u32>,
    #[arg(long)]
    catalog: Option<PathBuf>,
}

impl Overrides {
    fn file(&self) -> Result<ConfigFile> {
        let base = match &self.config {
            Some(path) => ConfigFile::load(path)?,
            None => ConfigFile::default(),
        };
        Ok(base.overlay(ConfigFile {
            seed: self.seed,
            evaluator: self.evaluator.clone(),
            endpoint: self.endpoint.clone(),
            timeout_secs: self.timeout_secs,
            max_depth: self.max_depth,
            catalog: self.catalog.as_ref().map(|p| p.display().to_string()),
            ..ConfigFile::default()
        }))
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Overrides,
    /// Epsilon schedule as `eps:count,...`.
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    parallel: Option<usize>,
    /// Directory for the replay DB, search log and checkpoint.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    net: String,
    #[command(flatten)]
    common: Overrides,
}

#[derive(Args)]
struct GraphArgs {
    #[arg(long)]
    net: String,
    /// Input tensor as `CxHxW`.
    #[arg(long, default_value = "3x32x32")]
    input: String,
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Round pooled sizes down instead of up.
    #[arg(long)]
    floor_pooling: bool,
    /// Also write the graph export to this file.
    #[arg(long)]
    export: Option<PathBuf>,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Best models, one row per distinct network.
    TopK {
        #[arg(long)]
        db: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Mean and max accuracy per epsilon stage.
    Stages {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// contains:<code>, swap_pairs or concat_effect.
    Query {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        query: String,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return ExitCode::from(2);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(kind_of(&e), &format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}

#[derive(Debug)]
struct EvalFailed(String);

impl std::fmt::Display for EvalFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "evaluation failed: {}", self.0)
    }
}

impl std::error::Error for EvalFailed {}

fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message.replace('\n', " ") }).to_string()
}

fn kind_of(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if cause.is::<EvalFailed>() {
            return "evaluator";
        }
        if cause.is::<HarnessError>() {
            return "harness";
        }
        if cause.is::<AnalysisError>() {
            return "analysis";
        }
        if cause.is::<SpaceError>() {
            return "net";
        }
        if cause.is::<ArchError>() {
            return "arch";
        }
        if cause.is::<CatalogError>() {
            return "catalog";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "error"
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run(args) => run(args),
        Command::Resume { checkpoint } => {
            let mut search = Search::resume(&checkpoint)?;
            search.run()?;
            report(&search);
            Ok(())
        }
        Command::Enumerate { max_depth, count_only } => enumerate(max_depth, count_only),
        Command::Eval(args) => eval(args),
        Command::Analyze(cmd) => analyze(cmd),
        Command::Graph(args) => graph(args),
        Command::ServeOracle { bind, config } => serve(&bind, config.as_deref()),
    }
}

fn run(args: RunArgs) -> Result<()> {
    let file = args.common.file()?.overlay(ConfigFile {
        schedule: args.schedule,
        parallel: args.parallel,
        run_dir: args.run_dir.map(|p| p.display().to_string()),
        ..ConfigFile::default()
    });
    let mut cfg = SearchConfig::from_file(&file)?;
    if cfg.run_dir.is_none() {
        cfg.run_dir = Some(PathBuf::from("run"));
    }
    let mut search = Search::new(cfg)?;
    search.run()?;
    report(&search);
    Ok(())
}

fn report(search: &Search) {
    let cfg = search.config();
    let unique = search.log().iter().filter(|r| !r.cached).count();
    println!("iterations  {}", search.iteration());
    println!("models      {unique}");
    println!("greedy      {}", encode_net(&search.greedy(), cfg.class_count));
    if let Some(best) = search.memory().entries().iter().max_by(|a, b| a.accuracy.total_cmp(&b.accuracy)) {
        println!("best        {}  {:.2}", best.net_string, best.accuracy * 100.0);
    }
    if let Some(dir) = &cfg.run_dir {
        println!("run dir     {}", dir.display());
    }
}

fn enumerate(max_depth: u32, count_only: bool) -> Result<()> {
    let space = SearchSpace::new(max_depth)?;
    if count_only {
        println!("{}", space.size());
        return Ok(());
    }
    let mut out = std::io::BufWriter::new(std::io::stdout().lock());
    for t in space.enumerate_all()? {
        writeln!(out, "{}", encode_net(&t, 10))?;
    }
    out.flush()?;
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let cfg = SearchConfig::from_file(&args.common.file()?)?;
    let decoded = decode_net(&args.net, cfg.max_depth)?;
    let request = EvalRequest {
        id: 1,
        blocks: decoded.trajectory.codes(),
        net_string: encode_net(&decoded.trajectory, decoded.classes),
        dataset: cfg.dataset,
        budget: cfg.budget,
    };
    let mut evaluator: Box<dyn Evaluator> = match &cfg.evaluator {
        EvaluatorConfig::Simulated(o) => Box::new(SimulatedEvaluator::new(o.clone())),
        EvaluatorConfig::External { endpoint, timeout } => Box::new(ExternalEvaluator::new(endpoint.clone(), *timeout)),
    };
    let response = evaluator.evaluate(&request);
    println!("{}", encode_response(&response));
    if !response.is_ok() {
        return Err(EvalFailed(response.detail).into());
    }
    Ok(())
}

fn load_db(path: &Path) -> Result<Vec<DbRow>> {
    Ok(read_jsonl(path)?)
}

fn analyze(cmd: AnalyzeCommand) -> Result<()> {
    match cmd {
        AnalyzeCommand::TopK { db, k } => print!("{}", analysis::top_k(&load_db(&db)?, k)?),
        AnalyzeCommand::Stages { db, csv } => {
            let stats = analysis::stage_stats(&load_db(&db)?);
            println!("epsilon  models  mean    max");
            for s in &stats {
                println!(
                    "{:<7}  {:>6}  {:>6.2}  {:>6.2}",
                    s.epsilon,
                    s.model_count,
                    s.mean_accuracy * 100.0,
                    s.max_accuracy * 100.0
                );
            }
            if let Some(path) = csv {
                let file = std::fs::File::create(&path).with_context(|| path.display().to_string())?;
                analysis::write_stage_csv(&stats, file)?;
            }
        }
        AnalyzeCommand::Query { db, query } => {
            let query: Query = query.parse()?;
            print!("{}", analysis::structural_query(&load_db(&db)?, &query)?);
        }
    }
    Ok(())
}

fn graph(args: GraphArgs) -> Result<()> {
    let owned;
    let cat = match &args.catalog {
        Some(path) => {
            owned = Catalog::load(path)?;
            &owned
        }
        None => catalog(),
    };
    let input: TensorShape = args.input.parse().map_err(|e: String| anyhow!("--input: {e}"))?;
    let depth = args.net.matches("B(").count().max(1) as u32;
    let decoded = decode_net(&args.net, depth)?;
    let options = BuildOptions { pool_rounding: if args.floor_pooling { PoolRounding::Floor } else { PoolRounding::Ceil } };
    let g = build_with(cat, &decoded.trajectory, input, decoded.classes, options)?;
    print!("{}", summarize(&g));
    if let Some(path) = args.export {
        std::fs::write(&path, export_graph(&g)).with_context(|| path.display().to_string())?;
    }
    Ok(())
}

fn serve(bind: &str, config: Option<&Path>) -> Result<()> {
    let file = match config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let EvaluatorConfig::Simulated(oracle) = SearchConfig::from_file(&ConfigFile { evaluator: None, ..file })?.evaluator
    else {
        unreachable!("evaluator key cleared above");
    };
    let listener = TcpListener::bind(bind).with_context(|| format!("bind {bind}"))?;
    eprintln!("serving simulated oracle on {}", listener.local_addr()?);
    serve_oracle(listener, oracle, Arc::new(AtomicBool::new(false)))?;
    Ok(())
}
