//! `brushforge` command-line interface.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use brushforge::experiments::Classifier;
use brushforge::patching::ChannelKind;
use brushforge::synth::Preset;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "brushforge",
    version,
    about = "Attribute painted-surface topography patches to artists"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a preset corpus of height maps, masks and pseudo-color images.
    Synth(SynthArgs),
    /// Detrend and normalize raw height maps (TOPO or PNG16 with sidecar).
    Ingest(IngestArgs),
    /// Cut a corpus into patches and record the train/validation/test split.
    Patchify(ExpArgs),
    /// Decompose every painting into IMFs and estimate their length scales.
    Emd(ExpArgs),
    /// Fit per-artist height densities on the training paintings.
    FitMle(ExpArgs),
    /// Train a CNN ensemble at one patch size.
    Train(ExpArgs),
    /// Score a trained model on its held-out paintings.
    Eval(ModelArgs),
    /// Accuracy and F1 against patch size.
    SweepPatch(ExpArgs),
    /// Accuracy per IMF channel against the full-height baseline.
    SweepImf(ImfArgs),
    /// Train on background, test on foreground and the reverse.
    CrossRegion(ExpArgs),
    /// Render per-patch attribution overlays for held-out paintings.
    RenderMap(RenderArgs),
}

#[derive(Debug, Clone, Args)]
pub struct OutArgs {
    /// Output directory; nothing is written elsewhere.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: OutArgs,
    #[arg(long, default_value = "separable")]
    pub preset: Preset,
    #[arg(long, default_value_t = 3)]
    pub paintings_per_artist: usize,
}

#[derive(Debug, Clone, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub common: OutArgs,
    /// JSON experiment config supplying detrend and normalize parameters.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "input", required = true)]
    pub inputs: Vec<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ExpArgs {
    #[command(flatten)]
    pub common: OutArgs,
    /// JSON experiment config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus directory or manifest.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Synthesize this preset in memory instead of reading a corpus.
    #[arg(long)]
    pub preset: Option<Preset>,
    /// Patch side(s) in pixels, comma separated.
    #[arg(long = "patch-px", value_delimiter = ',')]
    pub patch_px: Vec<usize>,
    /// Ensemble members per point.
    #[arg(long)]
    pub ensemble: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub classifier: Option<Classifier>,
    /// height | imf:k | pseudo-color
    #[arg(long)]
    pub channel: Option<ChannelKind>,
    /// Trial whose split single-point commands use.
    #[arg(long, default_value_t = 0)]
    pub trial: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ImfArgs {
    #[command(flatten)]
    pub exp: ExpArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 3, 4, 5])]
    pub imfs: Vec<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[command(flatten)]
    pub exp: ExpArgs,
    /// Output directory of a `train` or `fit-mle` run.
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct RenderArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Paintings to render; defaults to the model's held-out paintings.
    #[arg(long = "painting")]
    pub paintings: Vec<String>,
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("BRUSHFORGE_LOG", "info");
    let _ = env_logger::Builder::from_env(env)
        .format_timestamp(None)
        .try_init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    match commands::dispatch(cli.command) {
        Ok(manifest) => {
            log::info!(
                "{}: wrote {} outputs",
                manifest.command,
                manifest.outputs.len()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
