//! Command-line front end for the verifier experiments.
//!
//! Exit codes: 0 success, 2 configuration error, 3 theory violation or
//! oracle failure, 4 enumeration budget exceeded.

pub mod commands;
pub mod config;
pub mod table;

use std::io::{self, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use config::BlockLens;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("check failed: {0}")]
    Violation(String),
    #[error("budget exceeded: {0}")]
    Budget(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Violation(_) => 3,
            CliError::Budget(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl From<specdec_core::Error> for CliError {
    fn from(e: specdec_core::Error) -> Self {
        match e {
            specdec_core::Error::BudgetExceeded { .. } => CliError::Budget(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "specdec", version, about = "Token- and block-level draft verification experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Exact and Monte-Carlo acceptance lengths plus block efficiency per block length.
    Compare(CompareArgs),
    /// Closed-form curves for memoryless two-token sources.
    BernoulliSweep(SweepArgs),
    /// Batch run of the enumeration oracles over seeded random model pairs.
    OracleCheck(OracleArgs),
    /// Decode once and print the trace.
    Decode(DecodeArgs),
    /// Exact expected acceptance lengths and the upper bound, no sampling.
    Exact(ExactArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VerifierArg {
    Token,
    Block,
}

impl From<VerifierArg> for specdec_core::Verifier {
    fn from(v: VerifierArg) -> Self {
        match v {
            VerifierArg::Token => Self::Token,
            VerifierArg::Block => Self::Block,
        }
    }
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Draft model: `ber:<q>`, inline JSON or a JSON file.
    #[arg(long)]
    pub ms: String,
    /// Target model, same forms as --ms.
    #[arg(long)]
    pub mb: String,
    /// Token ids before the first block, e.g. `0,1,2`.
    #[arg(long, default_value = "")]
    pub prompt: String,
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Write here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Emit JSON instead of CSV.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub models: ModelArgs,
    /// Block lengths: `8`, `1..10` or `2,4,8`.
    #[arg(long = "L", default_value = "1..8")]
    pub block_lens: BlockLens,
    /// Restrict the Monte-Carlo columns to one verifier.
    #[arg(long)]
    pub verifier: Option<VerifierArg>,
    #[arg(long, default_value_t = 10_000)]
    pub trials: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Tokens per decode for block efficiency.
    #[arg(long, default_value_t = 128)]
    pub horizon: usize,
    /// Count the final iteration even when the horizon cut it short.
    #[arg(long)]
    pub include_partial: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Draft probability of token 1; several values separated by commas.
    #[arg(long, value_delimiter = ',', required = true)]
    pub p: Vec<f64>,
    /// Target probability of token 1.
    #[arg(long)]
    pub q: f64,
    /// Largest block length.
    #[arg(long = "L", default_value_t = 16)]
    pub max_len: usize,
    /// Add the free token, matching sums that start at i = 0.
    #[arg(long)]
    pub include_free_token: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// Number of random model pairs.
    #[arg(long, default_value_t = 50)]
    pub pairs: u64,
    #[arg(long, default_value_t = 2)]
    pub vocab: usize,
    #[arg(long = "L", default_value_t = 2)]
    pub block_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also check pairs whose rows carry 1e-12 of mass in places.
    #[arg(long)]
    pub adversarial: bool,
    /// Use exact rationals; every deviation must then be zero.
    #[arg(long)]
    pub exact: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub models: ModelArgs,
    #[arg(long = "L", default_value_t = 4)]
    pub block_len: usize,
    #[arg(long, value_enum, default_value = "block")]
    pub verifier: VerifierArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Token limit.
    #[arg(long, default_value_t = 64)]
    pub horizon: usize,
    /// Plain autoregressive sampling from the target instead.
    #[arg(long)]
    pub baseline: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct ExactArgs {
    #[command(flatten)]
    pub models: ModelArgs,
    #[arg(long = "L", default_value = "1..8")]
    pub block_lens: BlockLens,
    #[command(flatten)]
    pub output: OutputArgs,
}

/// Runs a parsed command. Diagnostics go to `err`; results go to `out`
/// unless the command names an output file.
pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Compare(a) => commands::compare(a, out, err),
        Command::BernoulliSweep(a) => commands::bernoulli_sweep(a, out),
        Command::OracleCheck(a) => commands::oracle_check(a, out, err),
        Command::Decode(a) => commands::decode(a, out),
        Command::Exact(a) => commands::exact(a, out),
    }
}
