//! Command-line front end: `pretrain`, `rl-train`, `decode`, `eval`, `analyze`.
//!
//! Configuration is a flat `key = value` file (`#` comments) merged with
//! command-line flags and `--set key=value` overrides, later sources winning.
//! Exit codes: 0 ok, 1 other failure, 2 config error, 3 numeric failure.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{cmd_analyze, cmd_decode, cmd_eval, cmd_pretrain, cmd_rl, read_traces, RunDir, FINAL_CHECKPOINT, LATEST_DIR};
pub use config::{parse_override, parse_pairs, Gamma, RunConfig, KEYS};

use crate::error::{Error, Result};

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "mdm-lab", version, about = "Masked-diffusion generation-order experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Args)]
pub struct Common {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Worker threads (results do not depend on this).
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub out_dir: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    /// Model checkpoint to start from or evaluate.
    #[arg(long)]
    pub checkpoint: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a denoiser from scratch with the masked-diffusion loss.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<String>,
    },
    /// GRPO over the autoregressive policy of a pretrained denoiser.
    RlTrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        updates: Option<String>,
        /// Continue from `checkpoints/latest` in `out_dir`.
        #[arg(long)]
        resume: bool,
    },
    /// Sample responses with traces for the evaluation instances.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long, alias = "mode")]
        modes: Option<String>,
        #[arg(long)]
        n: Option<String>,
        #[arg(long)]
        temperature: Option<String>,
    },
    /// Pass@k, coverage, entropy and parallel-decoding tables.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, alias = "mode")]
        modes: Option<String>,
        #[arg(long)]
        n: Option<String>,
        #[arg(long)]
        k: Option<String>,
        #[arg(long)]
        temperature: Option<String>,
        /// A threshold, or `sweep` for the `eb_gammas` grid.
        #[arg(long)]
        eb_gamma: Option<String>,
    },
    /// Recompute evaluation tables from the traces of an earlier run.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Run directory written by `eval`.
        #[arg(long)]
        run: PathBuf,
    },
}

fn push(pairs: &mut Vec<(String, String)>, key: &str, value: &Option<String>) {
    if let Some(v) = value {
        pairs.push((key.to_string(), v.clone()));
    }
}

/// Resolve the configuration for a parsed command line.
pub fn resolve(command: &Command) -> Result<RunConfig> {
    let (common, mut extra): (&Common, Vec<(String, String)>) = match command {
        Command::Pretrain { common, steps } => {
            let mut e = Vec::new();
            push(&mut e, "steps", steps);
            (common, e)
        }
        Command::RlTrain { common, updates, .. } => {
            let mut e = Vec::new();
            push(&mut e, "updates", updates);
            (common, e)
        }
        Command::Decode {
            common,
            modes,
            n,
            temperature,
        } => {
            let mut e = Vec::new();
            push(&mut e, "modes", modes);
            push(&mut e, "n", n);
            push(&mut e, "temperature", temperature);
            (common, e)
        }
        Command::Eval {
            common,
            modes,
            n,
            k,
            temperature,
            eb_gamma,
        } => {
            let mut e = Vec::new();
            push(&mut e, "modes", modes);
            push(&mut e, "n", n);
            push(&mut e, "k", k);
            push(&mut e, "temperature", temperature);
            push(&mut e, "eb_gamma", eb_gamma);
            (common, e)
        }
        Command::Analyze { common, run } => {
            let e = vec![("source_run".to_string(), run.display().to_string())];
            (common, e)
        }
    };

    let mut pairs = Vec::new();
    if let Command::Analyze { run, .. } = command {
        let echo = run.join("config.echo");
        let text = std::fs::read_to_string(&echo)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", echo.display())))?;
        pairs.extend(parse_pairs(&text)?);
    }
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        pairs.extend(parse_pairs(&text)?);
    }
    push(&mut pairs, "task", &common.task);
    push(&mut pairs, "out_dir", &common.out_dir);
    push(&mut pairs, "seed", &common.seed);
    push(&mut pairs, "checkpoint", &common.checkpoint);
    pairs.append(&mut extra);
    for s in &common.set {
        pairs.push(parse_override(s)?);
    }
    RunConfig::resolve(&pairs)
}

fn common(command: &Command) -> &Common {
    match command {
        Command::Pretrain { common, .. }
        | Command::RlTrain { common, .. }
        | Command::Decode { common, .. }
        | Command::Eval { common, .. }
        | Command::Analyze { common, .. } => common,
    }
}

fn dispatch(command: &Command) -> Result<()> {
    let cfg = resolve(command)?;
    match command {
        Command::Pretrain { .. } => cmd_pretrain(&cfg),
        Command::RlTrain { resume, .. } => cmd_rl(&cfg, *resume),
        Command::Decode { .. } => cmd_decode(&cfg),
        Command::Eval { .. } => cmd_eval(&cfg),
        Command::Analyze { .. } => cmd_analyze(&cfg),
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::ModelConfig(_) => EXIT_CONFIG,
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_OTHER,
    }
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match common(&cli.command).threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))
            .and_then(|pool| pool.install(|| dispatch(&cli.command))),
        None => dispatch(&cli.command),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
