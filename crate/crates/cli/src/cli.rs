//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use mint_core::aad::AuditableDataKind;
use mint_core::audited::TapName;
use mint_core::classifier::MintArchitecture;

#[derive(Debug, Parser)]
#[command(name = "mint", version, about = "Membership inference tests over audited model activations")]
pub struct Cli {
    /// JSON configuration; defaults to `<out>/config.json` when present.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; every other seed derives from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "mint-out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate (or ingest) the member and external datasets.
    GenData(GenDataArgs),
    /// Train the audited model on member samples.
    TrainAudited(TrainAuditedArgs),
    /// Capture tap activations and cache feature sets.
    Extract(ExtractArgs),
    /// Train the registry's MINT classifiers.
    TrainMint(TrainMintArgs),
    /// Run the experiment grid and write reports.
    Evaluate(EvaluateArgs),
    /// Re-emit a finished run in another format.
    Report(ReportArgs),
    /// Serve the HTTP audit API.
    Serve(ServeArgs),
}

#[derive(Debug, Default, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub samples_per_class: Option<usize>,
    #[arg(long)]
    pub external_count: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Ingest member images from a directory tree instead of generating them.
    #[arg(long, requires = "externals_dir")]
    pub members_dir: Option<PathBuf>,
    #[arg(long, requires = "members_dir")]
    pub externals_dir: Option<PathBuf>,
}

#[derive(Debug, Default, Args)]
pub struct TrainAuditedArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Default, Args)]
pub struct ExtractArgs {
    /// Comma-separated tap names, e.g. `conv_block_1,model_outcome`.
    #[arg(long, value_delimiter = ',')]
    pub taps: Option<Vec<TapName>>,
    #[arg(long)]
    pub normalize_outcome: bool,
}

#[derive(Debug, Default, Args)]
pub struct TrainMintArgs {
    #[arg(long, value_delimiter = ',')]
    pub kinds: Option<Vec<AuditableDataKind>>,
    #[arg(long, value_delimiter = ',')]
    pub architectures: Option<Vec<MintArchitecture>>,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Default, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_delimiter = ',')]
    pub kinds: Option<Vec<AuditableDataKind>>,
    #[arg(long, value_delimiter = ',')]
    pub architectures: Option<Vec<MintArchitecture>>,
    #[arg(long, value_delimiter = ',')]
    pub train_sizes: Option<Vec<usize>>,
    #[arg(long)]
    pub repetitions: Option<usize>,
    #[arg(long)]
    pub test_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub run_id: Option<String>,
    #[arg(long)]
    pub skip_untrained_control: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run id under `<out>/reports`, or a path to a `.run.json` file.
    #[arg(long)]
    pub run: String,
    /// csv, json or markdown.
    #[arg(long, default_value = "markdown")]
    pub format: String,
}

#[derive(Debug, Default, Args)]
pub struct ServeArgs {
    /// Defaults to `<out>/mint/registry.json`.
    #[arg(long)]
    pub registry: Option<PathBuf>,
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long)]
    pub max_concurrent: Option<usize>,
    /// Keep a copy of every uploaded image in this directory.
    #[arg(long)]
    pub retain_uploads: Option<PathBuf>,
}
