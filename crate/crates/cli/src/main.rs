use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fedcca::config::{parse_config, Algorithm};
use fedcca::data::export_clients;
use fedcca::exec::Executor;
use fedcca::orchestrator::{build_datasets, run_experiment_with};
use fedcca::output::write_outputs;
use fedcca::sweep::{run_sweep, SweepAxis, SweepSpec, SWEEP_SUMMARY_FILE};

/// Federated learning simulator with client-centric source selection.
#[derive(Debug, Parser)]
#[command(name = "fedcca", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment and write metrics.csv, selection_counts.csv and summary.json.
    Run(RunArgs),
    /// Run the cross product of one axis and several seeds.
    Sweep(SweepArgs),
    /// Write every client's generated train/test split as CSV.
    ExportData(ExportArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long, env = "FEDCCA_OUT_DIR")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    /// fedcca, fedavg, fedprox or local_only.
    #[arg(long)]
    algorithm: Option<Algorithm>,
    /// Worker threads for client training; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// alpha, local_epochs, classes_per_client, algorithm or ablation.
    #[arg(long)]
    axis: String,
    /// Comma-separated axis values.
    #[arg(long)]
    values: String,
    /// Comma-separated master seeds.
    #[arg(long)]
    seeds: String,
    /// Concurrent sub-runs; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[command(flatten)]
    common: Common,
}

fn parse_seeds(csv: &str) -> Result<Vec<u64>> {
    let seeds = csv
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<u64>().with_context(|| format!("invalid seed `{s}`")))
        .collect::<Result<Vec<_>>>()?;
    anyhow::ensure!(!seeds.is_empty(), "at least one seed is required");
    Ok(seeds)
}

fn load(path: &Path) -> Result<fedcca::config::ExperimentConfig> {
    parse_config(path).with_context(|| format!("cannot load config {}", path.display()))
}

fn run(args: RunArgs) -> Result<()> {
    let mut config = load(&args.common.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(rounds) = args.rounds {
        config.rounds = rounds;
    }
    if let Some(algorithm) = args.algorithm {
        config.algorithm = algorithm;
    }
    config.validate()?;
    let result = run_experiment_with(&config, &Executor::new(args.workers))?;
    write_outputs(&result, &args.common.out_dir)?;
    fs::write(args.common.out_dir.join("config.json"), config.to_json() + "\n")?;
    println!(
        "{} on {} clients: mean accuracy {:.4} after {} rounds, outputs in {}",
        result.algorithm,
        result.final_accuracy.len(),
        result.mean_accuracy,
        result.rounds,
        args.common.out_dir.display()
    );
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<()> {
    let spec = SweepSpec {
        base: load(&args.common.config)?,
        axis: SweepAxis::parse(&args.axis, &args.values)?,
        seeds: parse_seeds(&args.seeds)?,
    };
    let rows = run_sweep(&spec, &args.common.out_dir, &Executor::new(args.workers))?;
    let failed = rows.iter().filter(|r| !r.is_ok()).count();
    println!(
        "{} runs ({failed} failed), summary in {}",
        rows.len(),
        args.common.out_dir.join(SWEEP_SUMMARY_FILE).display()
    );
    Ok(())
}

fn export_data(args: ExportArgs) -> Result<()> {
    let config = load(&args.common.config)?;
    let clients = build_datasets(&config)?;
    export_clients(&clients, &args.common.out_dir)?;
    println!("{} clients written to {}", clients.len(), args.common.out_dir.display());
    Ok(())
}

/// Join the error chain, skipping causes the outer message already repeats.
fn one_line(error: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in error.chain() {
        let text = cause.to_string();
        if !parts.last().is_some_and(|prev| prev.contains(&text)) {
            parts.push(text);
        }
    }
    parts.join(": ").replace('\n', " ")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => run(args),
        Command::Sweep(args) => sweep(args),
        Command::ExportData(args) => export_data(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}
