//! Command-line driver over a run directory. Each subcommand reads the
//! artifacts of the previous stages and writes its own; see [`store`] for
//! the layout.

pub mod commands;
pub mod config;
pub mod report;
pub mod store;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use trainwatch_core::detector::{DistanceKind, EmbeddingSource};
use trainwatch_core::pipeline::Pipeline;

use crate::store::Split;

/// Exit status for a success without alerts.
pub const EXIT_OK: i32 = 0;
/// Exit status for an internal or usage error.
pub const EXIT_ERROR: i32 = 1;
/// Exit status when detection raised at least one alert.
pub const EXIT_ALERTS: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "trainwatch",
    version,
    about = "Faulty-machine detection for distributed training telemetry"
)]
pub struct Cli {
    /// TOML configuration; flags override it, it overrides built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory holding every artifact of one run.
    #[arg(long, global = true, default_value = "run")]
    pub run_dir: PathBuf,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the train, history and eval corpora with ground truth.
    Simulate(SimulateArgs),
    /// Align and normalize every corpus into the tensor cache.
    Preprocess(PreprocessArgs),
    /// Train one model per metric (and the integrated model).
    Train(TrainArgs),
    /// Learn the metric priority list from the history corpus.
    Prioritize(PrioritizeArgs),
    /// Run detection and write the alert stream.
    Detect(DetectArgs),
    /// Score an alert stream against ground truth.
    Evaluate(EvaluateArgs),
    /// Summarize every evaluation of the run as markdown.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Evaluation tasks.
    #[arg(long)]
    pub tasks: Option<usize>,
    /// Seed of the evaluation corpus.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Fault-free training tasks.
    #[arg(long)]
    pub train_tasks: Option<usize>,
    /// Labeled tasks for prioritization.
    #[arg(long)]
    pub history_tasks: Option<usize>,
    /// Machine counts to draw from, e.g. `4,8,16`.
    #[arg(long, value_delimiter = ',')]
    pub machines: Option<Vec<usize>>,
    /// Task length in seconds.
    #[arg(long)]
    pub duration: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Splits to process; all present ones by default.
    #[arg(long, value_delimiter = ',')]
    pub split: Option<Vec<Split>>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_windows: Option<usize>,
    /// Seed of weight initialization and batching.
    #[arg(long)]
    pub vae_seed: Option<u64>,
    /// Skip the integrated multi-metric model.
    #[arg(long)]
    pub no_integrated: bool,
}

#[derive(Debug, Args)]
pub struct PrioritizeArgs {
    #[arg(long)]
    pub max_depth: Option<usize>,
    /// Steps per labeled span.
    #[arg(long)]
    pub span: Option<usize>,
}

#[derive(Debug, Args, Clone)]
pub struct DetectorFlags {
    /// Normal score above which the top machine is a candidate.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Seconds a candidate must persist before alerting; 0 disables.
    #[arg(long)]
    pub continuity: Option<f64>,
    /// euclidean, manhattan or chebyshev.
    #[arg(long, value_parser = parse_distance)]
    pub distance: Option<DistanceKind>,
    /// denoised_vector or latent_mu.
    #[arg(long, value_parser = parse_embedding)]
    pub embedding: Option<EmbeddingSource>,
    /// Seconds of history each call scans.
    #[arg(long)]
    pub lookback: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// minder, md, raw, con or int.
    #[arg(long, default_value = "minder", value_parser = parse_pipeline)]
    pub pipeline: Pipeline,
    /// train, history or eval.
    #[arg(long, default_value = "eval")]
    pub split: Split,
    /// Only these task ids.
    #[arg(long, value_delimiter = ',')]
    pub task: Option<Vec<String>>,
    /// Detect on one trace file instead of a cached split; alerts go to stdout.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[command(flatten)]
    pub detector: DetectorFlags,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// minder, md, raw, con or int.
    #[arg(long, default_value = "minder", value_parser = parse_pipeline)]
    pub pipeline: Pipeline,
    #[arg(long, default_value = "eval")]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Also sweep threshold, continuity and distance kind for the primary
    /// pipeline on the eval corpus.
    #[arg(long)]
    pub sweep: bool,
}

fn parse_pipeline(s: &str) -> Result<Pipeline, String> {
    s.parse().map_err(|e: trainwatch_core::Error| e.to_string())
}

fn parse_distance(s: &str) -> Result<DistanceKind, String> {
    match s.to_ascii_lowercase().as_str() {
        "euclidean" => Ok(DistanceKind::Euclidean),
        "manhattan" => Ok(DistanceKind::Manhattan),
        "chebyshev" => Ok(DistanceKind::Chebyshev),
        _ => Err(format!(
            "unknown distance {s:?} (euclidean, manhattan, chebyshev)"
        )),
    }
}

fn parse_embedding(s: &str) -> Result<EmbeddingSource, String> {
    match s.to_ascii_lowercase().as_str() {
        "denoised_vector" | "denoised" => Ok(EmbeddingSource::DenoisedVector),
        "latent_mu" | "mu" => Ok(EmbeddingSource::LatentMu),
        _ => Err(format!(
            "unknown embedding {s:?} (denoised_vector, latent_mu)"
        )),
    }
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit status. Errors are printed to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match commands::execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_ERROR
        }
    }
}
