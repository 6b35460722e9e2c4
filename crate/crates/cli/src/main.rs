//! `lmgrow`: grow, train and evaluate small decoder models from TOML run
//! configurations.
//!
//! Exit status is 0 on success, 1 when a command fails at run time and 2
//! when the configuration is invalid or names a missing path.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or missing input; exit status 2.
    Config(String),
    /// Failure while running; exit status 1.
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<lmgrow::Error> for CliError {
    fn from(e: lmgrow::Error) -> Self {
        match e {
            lmgrow::Error::Config(_) | lmgrow::Error::Plan(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "lmgrow", version = env!("LMGROW_VERSION"), about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(short, long)]
    pub config: PathBuf,
    /// Override a configuration key, e.g. `--set sft.train.steps=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Root that a relative `output_dir` is resolved against.
    #[arg(long, env = "LMGROW_OUT")]
    pub out_root: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a randomly initialised checkpoint from `[model]`.
    Init(RunArgs),
    /// Expand a checkpoint by `[grow]` and check function preservation.
    Grow(RunArgs),
    /// Filter and deduplicate a corpus by `[filter]`.
    Filter(RunArgs),
    /// Continue pretraining on a mixed corpus by `[pretrain]`.
    Pretrain(RunArgs),
    /// Supervised fine-tuning by `[sft]`.
    Sft(RunArgs),
    /// Preference alignment by `[kto]`.
    Kto(RunArgs),
    /// Precompute frozen-reference log-probs by `[cache_logits]`.
    CacheLogits(RunArgs),
    /// k-shot multiple-choice evaluation by `[eval]`.
    Eval(RunArgs),
    /// Summarise the manifest and reports in an output directory.
    Report {
        dir: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Init(a) => commands::run("init", &a, commands::init),
        Command::Grow(a) => commands::run("grow", &a, commands::grow),
        Command::Filter(a) => commands::run("filter", &a, commands::filter),
        Command::Pretrain(a) => commands::run("pretrain", &a, commands::pretrain),
        Command::Sft(a) => commands::run("sft", &a, commands::sft),
        Command::Kto(a) => commands::run("kto", &a, commands::kto),
        Command::CacheLogits(a) => commands::run("cache-logits", &a, commands::cache_logits),
        Command::Eval(a) => commands::run("eval", &a, commands::eval),
        Command::Report { dir } => commands::report(&dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lmgrow: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
