// SPDX-License-Identifier: MIT OR Apache-2.0

//! `steer`: derive, apply and evaluate chain-of-thought steering vectors.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};
use serde::Serialize;

use config::is_false;

#[derive(Parser)]
#[command(
    name = "steer",
    version,
    about = "Contrastive chain-of-thought steering for small transformers"
)]
struct Cli {
    /// Worker threads for derive, eval and grid (0 = all cores). Output is
    /// identical for every value.
    #[arg(long, env = "STEER_JOBS", default_value_t = 1, global = true)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Derive steering vectors from a question corpus.
    Derive(DeriveArgs),
    /// Generate from a prompt with a steering vector applied.
    Generate(GenerateArgs),
    /// Generate with and without steering and show the difference.
    Compare(GenerateArgs),
    /// Score a dataset under one or more modes.
    Eval(EvalArgs),
    /// Render saved eval reports as a table.
    Table(TableArgs),
    /// Search layers and coefficients on a dev dataset.
    Grid(GridArgs),
    /// Show provenance, shapes and checksums of a model or vector file.
    Inspect(InspectArgs),
    /// Write the planted model and demo data.
    Fixture(FixtureArgs),
}

#[derive(Args, Serialize)]
pub struct DeriveArgs {
    /// JSON file with default settings; flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    /// Comma-separated layer indices (default: all).
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cot_suffix: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub direct_suffix: Option<String>,
    /// newline or space.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub join: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_new_tokens: Option<usize>,
    /// all, exclude_special or last_only.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub position_policy: Option<String>,
    /// Output directory for the vector set.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct GenerateArgs {
    /// Run config JSON (`vector_path`, `layer`, `coefficient`, `strategy`,
    /// `max_new_tokens`); flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Print the resolved run config and exit.
    #[arg(long)]
    #[serde(skip)]
    pub print_config: bool,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    #[arg(long = "vector")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vector_path: Option<PathBuf>,
    /// Defaults to the vector's layer.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    #[arg(long = "coef", allow_negative_numbers = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coefficient: Option<f32>,
    /// single or continuous.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    /// Prompt positions touched during prefill: all_current or new_only.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scope: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_new_tokens: Option<usize>,
    /// Apply a vector derived from a different model.
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    pub force: bool,
    /// Continuous runs above this |c| print a warning.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warn_coefficient: Option<f32>,
}

#[derive(Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Column name in tables (default: dataset file stem).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset_id: Option<String>,
    /// baseline, cot_prompted, single, continuous (comma-separated) or all.
    #[arg(long = "mode", value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub modes: Option<Vec<String>>,
    #[arg(long = "vector")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vector_path: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    /// Coefficient for single injection (and continuous unless
    /// --continuous-coef is given).
    #[arg(long = "coef", allow_negative_numbers = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coefficient: Option<f32>,
    #[arg(long = "continuous-coef", allow_negative_numbers = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub continuous_coefficient: Option<f32>,
    /// Instruction appended in cot_prompted mode.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cot_prompt: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_new_tokens: Option<usize>,
    /// Steering corpus, used to note whether the dataset is held out.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    pub force: bool,
}

#[derive(Args)]
pub struct TableArgs {
    /// Eval report JSON files.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    #[arg(long)]
    pub markdown: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct GridArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    /// Vector-set directory written by `derive`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vectors: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<usize>>,
    #[arg(long = "coefs", value_delimiter = ',', allow_negative_numbers = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coefficients: Option<Vec<f32>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    /// Dev dataset JSONL.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_new_tokens: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("target").required(true).args(["vector", "vectors", "model"])))]
pub struct InspectArgs {
    #[arg(long)]
    pub vector: Option<PathBuf>,
    #[arg(long)]
    pub vectors: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Machine-readable output.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args)]
pub struct FixtureArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = commands::FIXTURE_SEED)]
    pub seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let jobs = cli.jobs;
    let result = match cli.command {
        Command::Derive(a) => commands::derive(a, jobs),
        Command::Generate(a) => commands::generate(a, false),
        Command::Compare(a) => commands::generate(a, true),
        Command::Eval(a) => commands::eval(a, jobs),
        Command::Table(a) => commands::table(a),
        Command::Grid(a) => commands::grid(a, jobs),
        Command::Inspect(a) => commands::inspect(a),
        Command::Fixture(a) => commands::fixture(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
