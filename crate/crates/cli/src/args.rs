use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "burstsr",
    version,
    about = "Multi-frame super-resolution of raw bursts"
)]
pub struct Cli {
    /// Worker threads; 1 gives bitwise-reproducible output.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Seed for everything random.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a burst with ground truth.
    Synth(SynthArgs),
    /// Coarse registration of a burst to its first frame.
    Align(AlignArgs),
    /// Super-resolve a burst.
    Sr(SrArgs),
    /// Compare an estimate with the ground truth.
    Eval(EvalArgs),
    /// Time the solver.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output fixture directory.
    #[arg(long)]
    pub out: PathBuf,

    /// HR source image (PPM). Without it a dead-leaves scene is drawn.
    #[arg(long)]
    pub hr: Option<PathBuf>,

    /// Treat --hr as linear rather than sRGB-encoded.
    #[arg(long)]
    pub linear: bool,

    /// Side of the generated scene.
    #[arg(long, default_value_t = 128)]
    pub size: usize,

    /// Disks in the generated scene.
    #[arg(long, default_value_t = 300)]
    pub shapes: usize,

    #[arg(long, default_value_t = 14)]
    pub k: usize,

    #[arg(long, default_value_t = 4)]
    pub scale: usize,

    /// Full-color frames instead of Bayer mosaics.
    #[arg(long)]
    pub rgb: bool,

    #[arg(long)]
    pub no_noise: bool,

    #[arg(long, default_value_t = 1e-3)]
    pub shot_gain: f64,

    #[arg(long, default_value_t = 1e-4)]
    pub read_variance: f64,

    /// euclidean or affine.
    #[arg(long, default_value = "euclidean")]
    pub motion: String,

    /// Per-axis bound in LR pixels.
    #[arg(long, default_value_t = 2.0)]
    pub max_translation: f64,

    /// Bound in degrees.
    #[arg(long, default_value_t = 2.0)]
    pub max_rotation: f64,

    #[arg(long, default_value_t = 0.01)]
    pub max_affine: f64,

    /// Warp then bilinear resize instead of the solver's block-mean model.
    #[arg(long)]
    pub bilinear_downsample: bool,
}

#[derive(Debug, Args, Clone)]
pub struct LkArgs {
    /// translation, euclidean or affine.
    #[arg(long, default_value = "euclidean")]
    pub model: String,

    #[arg(long, default_value_t = 2)]
    pub levels: usize,

    #[arg(long, default_value_t = 50)]
    pub max_iters: usize,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[arg(long)]
    pub fixture: PathBuf,

    /// Motion file to write; printed to stdout otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,

    #[command(flatten)]
    pub lk: LkArgs,
}

#[derive(Debug, Args)]
pub struct SolverArgs {
    /// key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Override one config key, e.g. --set lambda=0.004.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    #[arg(long)]
    pub no_refine: bool,
}

#[derive(Debug, Args)]
pub struct SrArgs {
    #[arg(long)]
    pub fixture: PathBuf,

    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,

    /// Initial motions instead of coarse alignment.
    #[arg(long, conflicts_with = "use_gt_motions")]
    pub motions: Option<PathBuf>,

    /// Start from the fixture's ground-truth motions.
    #[arg(long)]
    pub use_gt_motions: bool,

    /// Comma-separated factors of a coarse-to-fine chain, e.g. 2,2,2,2.
    /// Their product must equal the configured scale.
    #[arg(long, value_delimiter = ',')]
    pub chain: Vec<usize>,

    #[command(flatten)]
    pub solver: SolverArgs,

    #[command(flatten)]
    pub lk: LkArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Estimate as PPM/PGM or BSR1.
    #[arg(long)]
    pub estimate: PathBuf,

    /// Ground-truth image; defaults to the fixture's hr.ppm.
    #[arg(long, required_unless_present = "fixture")]
    pub truth: Option<PathBuf>,

    /// Fixture supplying the truth, scale and true motions.
    #[arg(long)]
    pub fixture: Option<PathBuf>,

    #[arg(long)]
    pub scale: Option<usize>,

    /// Estimated motions; with true motions the geometric error is reported.
    #[arg(long)]
    pub motions: Option<PathBuf>,

    #[arg(long)]
    pub gt_motions: Option<PathBuf>,

    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Fixture to time; a synthetic 128x128, x4 burst otherwise.
    #[arg(long)]
    pub fixture: Option<PathBuf>,

    /// Burst length of the synthetic burst.
    #[arg(long, default_value_t = 14)]
    pub k: usize,

    #[arg(long, default_value_t = 10)]
    pub iters: usize,

    #[command(flatten)]
    pub solver: SolverArgs,
}
