use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use strategy_distill::config::PipelineConfig;
use strategy_distill::pipeline::{collect_stats, Manifest, Pipeline, PipelineError, ENTRIES_FILE, OUTCOMES_FILE};

#[derive(Parser)]
#[command(name = "sdistill", version, about = "Dual-teacher trajectory distillation pipeline")]
struct Cli {
    /// Pipeline config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Overrides the config parallelism.
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compose teacher trajectories by correctness routing.
    Compose {
        #[arg(long)]
        problems: PathBuf,
    },
    /// Select and balance agentic-favored and reasoning-favored problems.
    Curate {
        #[arg(long)]
        problems: PathBuf,
    },
    /// Sample student rollouts and build verification/correction entries.
    Selfdistill {
        #[arg(long)]
        problems: PathBuf,
    },
    /// Emit loss-masked training records. Inputs default to the outputs of
    /// `compose` and `selfdistill` in the output directory.
    Trainprep {
        #[arg(long)]
        outcomes: Option<PathBuf>,
        #[arg(long)]
        entries: Option<PathBuf>,
    },
    /// Accuracy at the standard and large budgets.
    Eval {
        #[arg(long)]
        problems: PathBuf,
    },
    /// Grade `{output, gold}` JSONL lines.
    Grade {
        #[arg(long)]
        pairs: PathBuf,
    },
    /// Print the counts of every manifest in the output directory.
    Stats,
}

fn existing(explicit: Option<PathBuf>, fallback: PathBuf) -> Option<PathBuf> {
    explicit.or_else(|| fallback.exists().then_some(fallback))
}

fn run(cli: Cli) -> Result<Option<Manifest>, PipelineError> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(p) = cli.parallelism {
        config.parallelism = p;
    }
    let out_dir = cli.out_dir;
    if let Command::Stats = cli.command {
        let stats = collect_stats(&out_dir)?;
        println!("{}", serde_json::to_string_pretty(&stats).map_err(std::io::Error::other)?);
        return Ok(None);
    }
    let pipeline = Pipeline::new(config, &out_dir)?;
    let manifest = match cli.command {
        Command::Compose { problems } => pipeline.compose(&problems)?,
        Command::Curate { problems } => pipeline.curate(&problems)?,
        Command::Selfdistill { problems } => pipeline.selfdistill(&problems)?,
        Command::Trainprep { outcomes, entries } => {
            let outcomes = existing(outcomes, out_dir.join(OUTCOMES_FILE));
            let entries = existing(entries, out_dir.join(ENTRIES_FILE));
            pipeline.trainprep(outcomes.as_deref(), entries.as_deref())?
        }
        Command::Eval { problems } => pipeline.eval(&problems)?,
        Command::Grade { pairs } => pipeline.grade(&pairs)?,
        Command::Stats => unreachable!(),
    };
    Ok(Some(manifest))
}

fn report(manifest: &Manifest, out_dir: &Path) -> anyhow::Result<()> {
    let counts = serde_json::to_string(&manifest.counts).context("rendering counts")?;
    println!("{}: {counts}", manifest.command);
    if manifest.partial {
        eprintln!(
            "warning: {} item(s) failed; see {}",
            manifest.failures,
            out_dir.join(format!("{}_failures.jsonl", manifest.command)).display()
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let out_dir = cli.out_dir.clone();
    match run(cli) {
        Ok(Some(manifest)) => match report(&manifest, &out_dir) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::FAILURE
            }
        },
        Ok(None) => ExitCode::SUCCESS,
        Err(e @ PipelineError::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
