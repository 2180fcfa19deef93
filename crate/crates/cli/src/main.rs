use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use dsae_cli::commands::{self, TrainOptions};
use dsae_cli::ExperimentConfig;

#[derive(Parser)]
#[command(name = "dsae", version, about = "Two-stage disentangled sequential autoencoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/val datasets named in the config.
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the configured variant; writes the log and checkpoints to output_dir.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Save and exit after this epoch.
        #[arg(long)]
        stop_after_epoch: Option<usize>,
    },
    /// Run the evaluation suite and write the report CSV.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to best.ckpt (or final.ckpt) in output_dir.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to eval_report.csv in output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export x^i, x^j, the reconstruction of i and both latent swaps.
    Swap {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        i: usize,
        #[arg(long)]
        j: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Finite-difference check of every operation and the full loss.
    GradCheck {
        #[arg(long)]
        config: PathBuf,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { config } => {
            commands::gen_data(&ExperimentConfig::load(&config)?)?;
        }
        Command::Train {
            config,
            resume,
            stop_after_epoch,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let state = commands::train(
                &cfg,
                &TrainOptions {
                    resume,
                    stop_after_epoch,
                },
            )?;
            println!("stopped after epoch {} (best val {:?})", state.epoch, state.best_val);
        }
        Command::Eval {
            config,
            checkpoint,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let ckpt = checkpoint.unwrap_or_else(|| commands::default_checkpoint(&cfg));
            let out = out.unwrap_or_else(|| cfg.output_dir.join(commands::REPORT_FILE));
            print!("{}", commands::eval(&cfg, &ckpt, &out)?);
        }
        Command::Swap {
            config,
            checkpoint,
            i,
            j,
            out_dir,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let ckpt = checkpoint.unwrap_or_else(|| commands::default_checkpoint(&cfg));
            commands::swap(&cfg, &ckpt, i, j, &out_dir)?;
        }
        Command::GradCheck { config } => {
            let report = commands::grad_check(&ExperimentConfig::load(&config)?)?;
            println!("{report}");
            return Ok(report.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
