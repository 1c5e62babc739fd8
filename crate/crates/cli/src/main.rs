//! `structpos`: annotate treebanks with structural positions, train and
//! evaluate the synthetic tasks, run the ablation grid and the self-tests.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 empty or entirely unparsable
//! input, 64 usage error. Setting `STRUCTPOS_SINGLE_THREAD` to anything but
//! `0` or the empty string pins every command to one thread.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use config::{ModelArgs, PositionArgs};

pub const SINGLE_THREAD_ENV: &str = "STRUCTPOS_SINGLE_THREAD";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    EmptyInput(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::EmptyInput(_) => 2,
            CliError::Usage(_) => 64,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<structpos::HarnessError> for CliError {
    fn from(e: structpos::HarnessError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "structpos",
    version,
    about = "Structural position encodings for self-attention"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Annotate a CoNLL-U file with sequential and structural positions (JSON lines).
    Annotate {
        /// CoNLL-U input; `-` reads standard input.
        #[arg(long)]
        input: PathBuf,
        /// JSON-lines output; `-` writes standard output.
        #[arg(long, default_value = "-")]
        output: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        position: PositionArgs,
    },
    /// Re-derive relative matrices of an annotation file from its trees.
    Verify {
        /// Annotation JSON lines produced by `annotate`.
        #[arg(long)]
        input: PathBuf,
        /// The CoNLL-U file that was annotated.
        #[arg(long)]
        trees: PathBuf,
    },
    /// Train on a synthetic task; writes a checkpoint and a run report.
    Train {
        /// Checkpoint path.
        #[arg(long)]
        output: PathBuf,
        /// Run report path (JSON); printed to standard output when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Directory receiving train.jsonl and test.jsonl.
        #[arg(long)]
        dump_data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        position: PositionArgs,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Evaluate a checkpoint on a dataset file or on the regenerated test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset JSON lines; when omitted the test split is regenerated
        /// from the data settings and seed.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value = "-")]
        output: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Train several ablation rows on identical data; writes reports and a CSV.
    Ablation {
        /// Comma-separated rows (default: all nine).
        #[arg(long, value_delimiter = ',')]
        rows: Vec<u8>,
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        position: PositionArgs,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Run the built-in verification suites.
    Selftest {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Run the antisymmetry suite against a copy of rule 2 with its sign
        /// removed; the suite is expected to fail.
        #[arg(long)]
        mutate_rule2_sign: bool,
    },
}

fn single_threaded() -> bool {
    std::env::var(SINGLE_THREAD_ENV).is_ok_and(|v| !v.is_empty() && v != "0")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 64,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if single_threaded() {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()
        {
            log::warn!("could not pin the thread pool: {e}");
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
