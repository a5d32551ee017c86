use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use kgadv::config::{PipelineConfig, SelectionMode};
use kgadv::pipeline::{self, Manifest, RunOptions, Stage};
use kgadv::{Error, Result};
use tracing_subscriber::EnvFilter;

#[derive(Debug, Parser)]
#[command(name = "kgadv", version, about = "Adversarial variant pipeline for KG-grounded VQA corpora")]
struct Cli {
    /// Pipeline config (TOML).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

/// Flags that override the corresponding config keys.
#[derive(Debug, clap::Args)]
struct Overrides {
    #[arg(long, global = true)]
    kg: Option<PathBuf>,
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    catalog: Option<PathBuf>,
    #[arg(long, global = true)]
    folds: Option<PathBuf>,
    #[arg(long, global = true)]
    blocklist: Option<PathBuf>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    verdict_log: Option<PathBuf>,
    /// One prediction file per fold, in fold order (repeatable).
    #[arg(long = "predictions", global = true)]
    predictions: Vec<PathBuf>,
    #[arg(long, global = true)]
    review_ui: Option<PathBuf>,
    #[arg(long, global = true, value_delimiter = ',')]
    relations: Option<Vec<String>>,
    #[arg(long, global = true)]
    cap_fix_a: Option<i64>,
    #[arg(long, global = true)]
    cap_fix_q: Option<i64>,
    #[arg(long, global = true)]
    selection: Option<SelectionArg>,
    #[arg(long, global = true)]
    dedupe_threshold: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    replace_prob: Option<f64>,
    #[arg(long, global = true)]
    epochs: Option<u64>,
    #[arg(long, global = true, value_delimiter = ',')]
    bucket_edges: Option<Vec<u64>>,
    #[arg(long, global = true, value_delimiter = ',')]
    annotators: Option<Vec<String>>,
    #[arg(long, global = true)]
    test_unverified: bool,
    #[arg(long, global = true)]
    augment_unverified: bool,
    #[arg(long, global = true)]
    bind: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SelectionArg {
    First,
    Seeded,
}

#[derive(Debug, Subcommand)]
enum Command {
    ExtractTemplates,
    GenerateVariants,
    AssignImages,
    /// Serve the annotation API and UI until interrupted.
    ReviewServe,
    Export,
    BuildFolds,
    Augment {
        /// Write the augmented training epochs to disk.
        #[arg(long)]
        freeze: bool,
    },
    Stats,
    Evaluate,
    /// Every batch stage in order (evaluate only with predictions).
    RunAll {
        #[arg(long)]
        freeze: bool,
    },
    /// Check the config and exit.
    Validate,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let path = cli.config.as_ref().ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut c = PipelineConfig::load(path)?;
    let o = &cli.overrides;
    let cwd = std::env::current_dir().map_err(|e| Error::Config(e.to_string()))?;
    let abs = |p: &PathBuf| cwd.join(p);
    macro_rules! set {
        ($field:expr, $value:expr) => {
            if let Some(v) = $value {
                $field = v;
            }
        };
    }
    set!(c.paths.kg, o.kg.as_ref().map(abs));
    set!(c.paths.corpus, o.corpus.as_ref().map(abs));
    set!(c.paths.catalog, o.catalog.as_ref().map(abs));
    set!(c.paths.folds, o.folds.as_ref().map(abs));
    set!(c.paths.output_dir, o.output_dir.as_ref().map(abs));
    if let Some(b) = &o.blocklist {
        c.paths.blocklist = Some(abs(b));
    }
    if let Some(v) = &o.verdict_log {
        c.paths.verdict_log = Some(abs(v));
    }
    if let Some(u) = &o.review_ui {
        c.paths.review_ui = Some(abs(u));
    }
    if !o.predictions.is_empty() {
        c.paths.predictions = o.predictions.iter().map(abs).collect();
    }
    set!(c.relations, o.relations.clone());
    set!(c.cap_fix_a, o.cap_fix_a);
    set!(c.cap_fix_q, o.cap_fix_q);
    set!(
        c.selection,
        o.selection.map(|s| match s {
            SelectionArg::First => SelectionMode::First,
            SelectionArg::Seeded => SelectionMode::Seeded,
        })
    );
    set!(c.dedupe_threshold, o.dedupe_threshold);
    set!(c.seed, o.seed);
    set!(c.replace_prob, o.replace_prob);
    set!(c.epochs, o.epochs);
    set!(c.bucket_edges, o.bucket_edges.clone());
    set!(c.annotators, o.annotators.clone());
    set!(c.bind, o.bind.clone());
    c.test_unverified |= o.test_unverified;
    c.augment_unverified |= o.augment_unverified;
    c.validate()?;
    Ok(c)
}

fn report(m: &Manifest) {
    let counts: Vec<String> = m.counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
    println!("{} (seq {}): {}", m.stage, m.sequence, counts.join(" "));
    let drops: Vec<String> = m.drop_reasons.iter().filter(|(_, v)| **v > 0).map(|(k, v)| format!("{k}={v}")).collect();
    if !drops.is_empty() {
        println!("  dropped: {}", drops.join(" "));
    }
}

fn print_artifact(config: &PipelineConfig, stage: Stage, file: &str) -> Result<()> {
    let path = pipeline::stage_dir(config, stage).join(file);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Io { path, source: e })?;
    print!("{text}");
    Ok(())
}

fn review_serve(config: &PipelineConfig) -> Result<()> {
    let (book, log) = pipeline::open_review(config)?;
    let addr: SocketAddr = config.bind.parse().map_err(|e| Error::Config(format!("bind address {}: {e}", config.bind)))?;
    let state = kgadv_review::ReviewState::new(book, log);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Error::Io { path: PathBuf::from("<runtime>"), source: e })?;
    runtime
        .block_on(kgadv_review::serve(addr, state, config.paths.review_ui.clone()))
        .map_err(|e| Error::Io { path: PathBuf::from(&config.bind), source: e })
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli)?;
    let stage = match cli.command {
        Command::Validate => {
            println!("config ok");
            return Ok(());
        }
        Command::ReviewServe => return review_serve(&config),
        Command::RunAll { freeze } => {
            for m in pipeline::run_all(&config, RunOptions { freeze })? {
                report(&m);
            }
            return Ok(());
        }
        Command::ExtractTemplates => Stage::ExtractTemplates,
        Command::GenerateVariants => Stage::GenerateVariants,
        Command::AssignImages => Stage::AssignImages,
        Command::Export => Stage::Export,
        Command::BuildFolds => Stage::BuildFolds,
        Command::Augment { .. } => Stage::Augment,
        Command::Stats => Stage::Stats,
        Command::Evaluate => Stage::Evaluate,
    };
    let freeze = matches!(cli.command, Command::Augment { freeze: true });
    let manifest = pipeline::run_stage(stage, &config, RunOptions { freeze })?;
    report(&manifest);
    match stage {
        Stage::Stats => print_artifact(&config, stage, "table.txt"),
        Stage::Evaluate => print_artifact(&config, stage, "table.txt"),
        _ => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
