//! Command-line entry point for the two-step few-shot fine-tuning
//! pipeline: class assignment, stage execution, and grid sweeps.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fadi_core::cli::{cmd_assign, cmd_run, cmd_sweep, AssignArgs, CliError, RunConfig, StageSel, SweepGrid};

#[derive(Parser)]
#[command(name = "fadi", version, about = "Two-step few-shot fine-tuning on feature embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Associate novel classes with base classes and print the map as JSON.
    Assign {
        /// Similarity CSV (header row of base names, one row per novel class).
        #[arg(long)]
        sim: Option<PathBuf>,
        /// Taxonomy file (`id<TAB>parents<TAB>count` lines).
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        /// Comma-separated novel class names (with --taxonomy).
        #[arg(long)]
        novel: Option<String>,
        /// Comma-separated base class names (with --taxonomy).
        #[arg(long)]
        base: Option<String>,
        /// top1 | topk:K | top1-nodup | random:SEED | manual:{"novel":"base"}.
        #[arg(long)]
        policy: String,
    },
    /// Run pipeline stages on a seeded synthetic world.
    Run {
        /// JSON run config; `{}` uses the defaults.
        #[arg(long)]
        config: PathBuf,
        /// base | associate | discriminate | tfa | all.
        #[arg(long, default_value = "all")]
        stage: String,
        /// Output directory (overrides the config's out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Seeded grid search over margin weights, shots, and policies.
    Sweep {
        /// JSON run config used as the base cell.
        #[arg(long)]
        config: PathBuf,
        /// JSON grid: {"alpha":[..],"beta":[..],"gamma":[..],"k":[..],"policy":[..]}.
        #[arg(long)]
        grid: PathBuf,
        /// Number of seeds per cell.
        #[arg(long)]
        seeds: usize,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Assign { sim, taxonomy, novel, base, policy } => {
            let json = cmd_assign(&AssignArgs { sim, taxonomy, novel, base, policy })?;
            print!("{json}");
            Ok(())
        }
        Command::Run { config, stage, out } => {
            let mut cfg = RunConfig::load(&config)?;
            cfg.apply_env_seed()?;
            let sel: StageSel = stage.parse()?;
            cmd_run(&cfg, sel, out.as_deref())?;
            Ok(())
        }
        Command::Sweep { config, grid, seeds, out } => {
            let mut cfg = RunConfig::load(&config)?;
            cfg.apply_env_seed()?;
            let grid = SweepGrid::load(&grid)?;
            cmd_sweep(&cfg, &grid, seeds, out.as_deref())?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
