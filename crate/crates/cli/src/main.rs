// SPDX-License-Identifier: MIT OR Apache-2.0

//! `ascd`: profile heads, decode, evaluate and sweep from a config file.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use ascd_core::Error as CoreError;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "ascd", version, about = "Attention-steered contrastive decoding laboratory")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GlobalArgs {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Decoding method (original, ascd, vcd, icd; eval also takes
    /// random-heads, all-heads, random-critical). Repeatable for eval.
    #[arg(long, global = true)]
    pub method: Vec<String>,
    /// Decoding strategy (greedy, nucleus, beam). Repeatable for eval.
    #[arg(long, global = true)]
    pub strategy: Vec<String>,
    /// Write a JSON-lines step trace.
    #[arg(long, global = true)]
    pub trace: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic world files.
    Worldgen,
    /// Vote text-centric heads over the reference scenes.
    Profile,
    /// Generate for one prompt.
    Decode {
        /// Scene index.
        #[arg(long)]
        scene: Option<usize>,
        /// Ask whether this class is present instead of captioning.
        #[arg(long)]
        probe: Option<usize>,
    },
    /// Run the evaluation grid.
    Eval {
        /// Rescore persisted records instead of decoding.
        #[arg(long)]
        from_records: Option<PathBuf>,
    },
    /// One-at-a-time hyperparameter sweep.
    Sweep,
    /// Metric deltas of every method against a reference method.
    Compare {
        #[arg(long, default_value = "original")]
        reference: String,
    },
}

/// Error with its exit code: 2 for usage and configuration problems, 1
/// for everything else.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let code = match e {
            CoreError::InvalidConfig(_)
            | CoreError::MissingArtifact(_)
            | CoreError::OutOfRange { .. }
            | CoreError::SequenceOverflow { .. }
            | CoreError::EmptyInput(_) => 2,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::internal(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::internal(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ASCD_LOG", "warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
