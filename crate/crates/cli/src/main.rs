use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use hypervae_cli::{replay, run_command, Command, ExperimentConfig, Manifest};

#[derive(Parser)]
#[command(name = "hypervae", version, about = "Train and evaluate hyper-level VAEs")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one VAE per task.
    TrainVae(RunArgs),
    /// Train the hyper-VAE over all tasks.
    TrainHypervae(RunArgs),
    /// Importance-sampled NLL per task for VAE and hyper-VAE.
    EvalDensity(RunArgs),
    /// Hold-one-class-out outlier detection.
    Outlier(RunArgs),
    /// Search for a held-out class design with BO.
    Discover(RunArgs),
    /// Two-part and bits-back code lengths.
    MdlReport(RunArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(RunArgs),
    /// Rerun a recorded run and compare CSV hashes.
    Replay {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(args: &RunArgs, cmd: Command) -> Result<bool> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out = args.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let outcome = run_command(cmd, &cfg, &out)?;
    eprintln!("[hypervae] wrote {}", outcome.manifest_path.display());
    Ok(outcome.passed)
}

fn main_inner(cli: Cli) -> Result<bool> {
    match cli.command {
        Cmd::TrainVae(a) => run(&a, Command::TrainVae),
        Cmd::TrainHypervae(a) => run(&a, Command::TrainHypervae),
        Cmd::EvalDensity(a) => run(&a, Command::EvalDensity),
        Cmd::Outlier(a) => run(&a, Command::Outlier),
        Cmd::Discover(a) => run(&a, Command::Discover),
        Cmd::MdlReport(a) => run(&a, Command::MdlReport),
        Cmd::Gradcheck(a) => run(&a, Command::Gradcheck),
        Cmd::Replay { manifest, out } => {
            let m = Manifest::load(&manifest).context("loading manifest")?;
            let mismatches = replay(&m, &out)?;
            for mm in &mismatches {
                eprintln!(
                    "mismatch {}: expected {} got {}",
                    mm.path,
                    mm.expected,
                    mm.actual.as_deref().unwrap_or("<missing>")
                );
            }
            if mismatches.is_empty() {
                eprintln!("[hypervae] replay matches ({} csv files)", m.csv_artifacts().count());
            }
            Ok(mismatches.is_empty())
        }
    }
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
