//! `lqmfg` — validate, solve, learn and evaluate linear-quadratic mean-field games.
//!
//! Exit codes: 0 success, 1 usage or validation failure, 2 numerical failure.

mod commands;
mod config;
mod output;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lqmfg::LoopMode;

use crate::commands::Context;
use crate::config::{PolicyChoice, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "lqmfg", version, about = "Linear-quadratic mean-field games: oracle, learner and ε-Nash evaluation")]
struct Cli {
    /// TOML configuration, or a `manifest.json` from an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for CSV, JSON and the manifest.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Outer-loop mode; for `eval-ne` and `sweep` it also selects the trained policy.
    #[arg(long, global = true, value_parser = ["model-free", "exact-critic", "exact-inner"])]
    mode: Option<String>,
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Model checks and the contraction assumption.
    Validate,
    /// Riccati quantities, equilibrium mean field, gain and cost.
    Oracle,
    /// Run the outer loop.
    Train,
    /// ε-Nash gap of the deployed policy at one population size.
    EvalNe {
        /// Population size; overrides `[sweep] n`.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Gap table over the configured population sizes and round counts.
    Sweep,
    /// Critic error against trajectory length.
    CriticBench,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Oracle => "oracle",
            Command::Train => "train",
            Command::EvalNe { .. } => "eval-ne",
            Command::Sweep => "sweep",
            Command::CriticBench => "critic-bench",
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    ValidationFailed,
    Core(lqmfg::Error),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Usage(format!("{}: {e}", path.display()))
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::ValidationFailed => 1,
            CliError::Core(e) if e.is_numerical() => 2,
            CliError::Core(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::ValidationFailed => write!(f, "validation failed"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<lqmfg::Error> for CliError {
    fn from(e: lqmfg::Error) -> Self {
        CliError::Core(e)
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::Usage("missing --config PATH".into()))?;
    let mut cfg = config::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = &cli.mode {
        cfg.train.mode = mode.parse::<LoopMode>()?;
        cfg.sweep.policy = PolicyChoice::Trained;
    }
    if let Command::EvalNe { n: Some(n) } = cli.command {
        cfg.sweep.n = n;
    }
    cfg.train.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve(cli)?;
    let ctx = Context {
        command: cli.command.name(),
        cfg,
        out: cli.out.as_deref(),
        json: cli.json,
    };
    log::info!("{} with seed {}", ctx.command, ctx.cfg.seed);
    match cli.command {
        Command::Validate => commands::validate(&ctx),
        Command::Oracle => commands::oracle(&ctx),
        Command::Train => commands::train(&ctx),
        Command::EvalNe { .. } => commands::eval_ne(&ctx),
        Command::Sweep => commands::sweep_cmd(&ctx),
        Command::CriticBench => commands::critic_bench(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !matches!(e, CliError::ValidationFailed) {
                eprintln!("error: {e}");
                if matches!(e, CliError::Usage(_)) {
                    eprintln!("run `lqmfg --help` for usage");
                }
            }
            ExitCode::from(e.exit_code())
        }
    }
}
