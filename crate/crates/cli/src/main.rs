use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod report;

/// Dataset distillation by progressive trajectory matching.
#[derive(Debug, Parser)]
#[command(name = "trajdistill", version)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory (overrides `out_dir` in the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train teachers and write their trajectories.
    Buffer,
    /// Learn the synthetic set from a trajectory file.
    Distill {
        /// Trajectory file; defaults to `<out>/trajectories.tjbf`.
        trajectories: Option<PathBuf>,
        /// Continue from `<out>/checkpoint.dsck`.
        #[arg(long)]
        resume: bool,
        /// Stop (with a checkpoint) after this iteration.
        #[arg(long)]
        halt_after: Option<usize>,
    },
    /// Train fresh networks on a synthetic set and test them on real data.
    Eval {
        /// Synthetic set; defaults to `<out>/synthetic.synd`.
        synthetic: Option<PathBuf>,
    },
    /// Aggregate metrics CSVs from several runs per iteration.
    Report {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
    },
    /// Write the Gaussian-blob toy dataset and a matching config.
    GenToy,
}

/// An error with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    /// Configuration, validation and input-format problems.
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    /// Failures while doing the work.
    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<trajdistill::Error> for CliError {
    fn from(e: trajdistill::Error) -> Self {
        use trajdistill::Error::*;
        match e {
            Training { .. }
            | Unroll { .. }
            | State(_)
            | Scheduler(_)
            | DegenerateTrajectory(_)
            | Connectivity(_)
            | Io(_)
            | Csv(_) => Self::runtime(e.to_string()),
            _ => Self::config(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let result = match &cli.command {
        Command::Buffer => commands::buffer(&cli),
        Command::Distill {
            trajectories,
            resume,
            halt_after,
        } => commands::distill(&cli, trajectories.as_deref(), *resume, *halt_after),
        Command::Eval { synthetic } => commands::eval(&cli, synthetic.as_deref()),
        Command::Report { metrics } => report::run(metrics, cli.out.as_deref()),
        Command::GenToy => commands::gen_toy(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
