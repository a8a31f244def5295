mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use alm::AlmError;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Scene synthesis, inference, prediction, evaluation, clustering and rendering on a 2D lattice.
#[derive(Parser, Debug)]
#[command(name = "alm", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic scene with ground truth.
    Synth(SynthArgs),
    /// Infer constraint map, sources and relations from observed prefixes.
    Infer(InferArgs),
    /// Complete every agent's trajectory.
    Predict(PredictArgs),
    /// Score predictions and an estimate against a scene.
    Eval(EvalArgs),
    /// Group sources into functional classes.
    Cluster(ClusterArgs),
    /// Draw a scene, field or tracks as a plain portable pixmap or graymap.
    Render(RenderArgs),
    /// Generate (and optionally infer) the toy grid of scenes.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Manifest path [default: <out>.manifest.json].
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub sources: Option<usize>,
    #[arg(long)]
    pub agents: Option<usize>,
    #[arg(long)]
    pub obstacle_ratio: Option<f64>,
    /// Probabilities of single, sequential and change behaviors, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub mix: Option<Vec<f64>>,
    /// Observed fraction of each track [default: 0.5].
    #[arg(long)]
    pub observed: Option<f64>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub scene: PathBuf,
    /// Estimate output (constraint map, sources, relations).
    #[arg(long)]
    pub out: PathBuf,
    /// Trace CSV output.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Diagnostics JSON output.
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub max_goals: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PredictMode {
    Offline,
    Online,
    Sp,
    Rw,
    Pm,
    Gm,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub estimate: PathBuf,
    #[arg(long, value_enum)]
    pub mode: PredictMode,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Total frames per agent, overriding each track's horizon.
    #[arg(long)]
    pub horizon: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub prediction: PathBuf,
    #[arg(long)]
    pub estimate: Option<PathBuf>,
    /// Report JSON output.
    #[arg(long)]
    pub out: PathBuf,
    /// One-row CSV summary.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ClusterArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, required_unless_present = "archetypes", requires = "estimate")]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub estimate: Option<PathBuf>,
    /// Cluster a generated suite of this many queue/dwell/exit sources instead of a scene.
    #[arg(long, conflicts_with = "scene")]
    pub archetypes: Option<usize>,
    /// Label CSV output.
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for mean feature-map rasters per cluster.
    #[arg(long)]
    pub maps_dir: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RenderKind {
    Obstacles,
    Field,
    Arrows,
    Tracks,
    Likelihood,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub estimate: Option<PathBuf>,
    #[arg(long)]
    pub prediction: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub kind: RenderKind,
    /// Raster output; a `.pgm` extension writes a graymap, anything else a pixmap.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub cell_size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Base seed of the grid.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',', default_values_t = alm::synth::TOY_SOURCES)]
    pub sources: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = alm::synth::TOY_AGENTS)]
    pub agents: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub layouts: u64,
    /// Run inference on every scene and write the accuracy table.
    #[arg(long)]
    pub infer: bool,
    #[arg(long)]
    pub iterations: Option<usize>,
}

fn exit_code(e: &AlmError) -> u8 {
    match e {
        AlmError::Input(_)
        | AlmError::Format(_)
        | AlmError::Json(_)
        | AlmError::Io(_)
        | AlmError::Dimension(_)
        | AlmError::OutOfBounds { .. } => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
