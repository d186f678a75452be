//! `dynamite`: stage-oriented CLI for the dynamic defense-selection
//! pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dynamite_cli::config::{validate_config, PipelineConfig};
use dynamite_cli::stages::{rerender_report, run_all, run_stage};
use dynamite_cli::CliError;

#[derive(Parser)]
#[command(
    name = "dynamite",
    about = "Dynamic defense selection for ML-based intrusion detection",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct StageArgs {
    /// Pipeline configuration file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker-thread bound for attack generation, defense training, and
    /// evaluation. Timing measurements always run single-threaded.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest, clean, standardize, encode, and split the dataset.
    Preprocess(StageArgs),
    /// Train the baseline classifier on the clean training split.
    TrainBaseline(StageArgs),
    /// Generate the attack-by-epsilon adversarial grid from the test split.
    GenAttacks(StageArgs),
    /// Train all nine defenses against the frozen baseline.
    TrainDefenses(StageArgs),
    /// Build the performance matrix, label samples, and train the selector.
    BuildRouter(StageArgs),
    /// Score the router against no-defense, random, best-static, and oracle.
    Evaluate(StageArgs),
    /// Run all six stages in order.
    RunAll(StageArgs),
    /// Re-render the plain-text tables from stored artifacts.
    Report {
        /// Run directory holding report.json.
        #[arg(long)]
        out: PathBuf,
    },
}

fn configure_threads(cli_threads: Option<usize>, config: &PipelineConfig) {
    if let Some(n) = cli_threads.or(config.threads) {
        // ignore failure: the global pool can only be set once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn stage_command(name: &str, args: &StageArgs) -> Result<(), CliError> {
    let config = validate_config(&args.config)?;
    let out_dir = args.out.clone().unwrap_or_else(|| config.output_dir.clone());
    configure_threads(args.threads, &config);
    let manifest = run_stage(name, &config, &out_dir)?;
    eprintln!(
        "{name}: ok ({} outputs, {} ms)",
        manifest.outputs.len(),
        manifest.duration_ms
    );
    Ok(())
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Preprocess(args) => stage_command("preprocess", args),
        Command::TrainBaseline(args) => stage_command("train-baseline", args),
        Command::GenAttacks(args) => stage_command("gen-attacks", args),
        Command::TrainDefenses(args) => stage_command("train-defenses", args),
        Command::BuildRouter(args) => stage_command("build-router", args),
        Command::Evaluate(args) => stage_command("evaluate", args),
        Command::RunAll(args) => {
            let config = validate_config(&args.config)?;
            let out_dir = args.out.clone().unwrap_or_else(|| config.output_dir.clone());
            configure_threads(args.threads, &config);
            let manifests = run_all(&config, &out_dir)?;
            for m in &manifests {
                eprintln!("{}: ok ({} ms)", m.stage, m.duration_ms);
            }
            eprintln!("report: {}", out_dir.join("report.txt").display());
            Ok(())
        }
        Command::Report { out } => rerender_report(out),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
