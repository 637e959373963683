use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

/// Metamorphic testing of multi-turn question answering systems.
#[derive(Debug, Parser)]
#[command(name = "mortar", version)]
pub struct Cli {
    /// TOML or JSON file with default settings; flags and environment win.
    #[arg(long, global = true, env = "MORTAR_CONFIG")]
    pub config: Option<PathBuf>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build annotated perturbed datasets from a seed dataset.
    Generate(GenerateArgs),
    /// Send perturbed dialogues to a system under test.
    Run(RunArgs),
    /// Find metamorphic relation conflicts in transcripts.
    Detect(DetectArgs),
    /// Tabulate datasets, bug summaries and bug overlaps.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    #[arg(long, env = "MORTAR_OUT_DIR")]
    pub out_dir: Option<PathBuf>,
    /// Dialogues processed concurrently.
    #[arg(long, env = "MORTAR_PARALLELISM")]
    pub parallelism: Option<usize>,
    /// Per-request timeout in seconds for HTTP services.
    #[arg(long)]
    pub timeout_secs: Option<u64>,
    #[arg(long)]
    pub max_retries: Option<u32>,
}

#[derive(Debug, Clone, Args)]
pub struct EmbedderArgs {
    /// Sentence-embedding service (POST /embed).
    #[arg(long, env = "MORTAR_EMBEDDER_ENDPOINT", conflicts_with = "fallback_embedder")]
    pub embedder_endpoint: Option<String>,
    /// Use the built-in hashing embedder.
    #[arg(long)]
    pub fallback_embedder: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// coqa or generic.
    #[arg(long)]
    pub format: Option<String>,
    /// Comma-separated kinds: ds, dr, dd, dsr, dsd, orig.
    #[arg(long)]
    pub perturbations: Option<String>,
    #[arg(long)]
    pub reduce_ratio: Option<f64>,
    #[arg(long)]
    pub duplicate_ratio: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Chat-completions endpoint for extraction.
    #[arg(long, env = "MORTAR_EXTRACTOR_ENDPOINT", conflicts_with = "mock_extractor")]
    pub extractor_endpoint: Option<String>,
    #[arg(long, env = "MORTAR_EXTRACTOR_MODEL")]
    pub extractor_model: Option<String>,
    /// Fixture file answering extraction requests offline.
    #[arg(long)]
    pub mock_extractor: Option<PathBuf>,
    /// Directory overriding the built-in prompt templates.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// Coreference service (POST /coref); a lexicon heuristic is used otherwise.
    #[arg(long, env = "MORTAR_COREF_ENDPOINT")]
    pub coref_endpoint: Option<String>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Annotated perturbed-dataset files, or directories holding them.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Chat-completions endpoint of the system under test.
    #[arg(long, env = "MORTAR_SUT_ENDPOINT", conflicts_with = "sut")]
    pub sut_endpoint: Option<String>,
    #[arg(long, env = "MORTAR_SUT_MODEL")]
    pub sut_model: Option<String>,
    /// Offline system: mock:oracle, mock:amnesiac:K, mock:stubborn, mock:parrot, mock:random[:SEED].
    #[arg(long)]
    pub sut: Option<String>,
    /// self_generated or gold.
    #[arg(long)]
    pub history_policy: Option<String>,
    #[command(flatten)]
    pub embedder: EmbedderArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Transcript files, or directories holding them.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub eps_a: Option<f64>,
    #[arg(long)]
    pub eps_b: Option<f64>,
    /// Compare occurrences of a question only within one perturbation kind.
    #[arg(long)]
    pub per_kind: bool,
    #[command(flatten)]
    pub embedder: EmbedderArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Annotated perturbed-dataset files or directories for the dataset summary.
    #[arg(long, num_args = 1..)]
    pub datasets: Vec<PathBuf>,
    /// Detection output directories for the MR table.
    #[arg(long, num_args = 1..)]
    pub detections: Vec<PathBuf>,
    /// NAME=PATH pairs of bug files or detection directories to compare.
    #[arg(long, num_args = 2..)]
    pub overlap: Vec<String>,
    /// Overlap over every unique bug instead of critical ones only.
    #[arg(long)]
    pub all_bugs: bool,
    #[command(flatten)]
    pub common: Common,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { commands::EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    ExitCode::from(commands::dispatch(cli))
}
