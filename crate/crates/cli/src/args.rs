use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vessel_synth::data::Split;

/// Vessel segmentation synthesis from T2-weighted slices.
///
/// Set VSYNTH_DETERMINISTIC=1 to run every kernel on a single thread.
#[derive(Parser, Debug)]
#[command(name = "vessel-synth", version, about, long_about = None)]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic phantom dataset with a manifest.
    SynthData(SynthDataArgs),
    /// Crop and normalise raw T2/segmentation pairs into a training dataset.
    Preprocess(PreprocessArgs),
    /// Run one training phase.
    Train(TrainArgs),
    /// Score a checkpoint on one split of a manifest.
    Evaluate(EvaluateArgs),
    /// Predict a segmentation volume from a T2 volume.
    Infer(InferArgs),
    /// Retrain phase 2 for several dilation radii and a no-mask control.
    AblateDilation(AblateArgs),
    /// Plot loss curves, uncertainty trajectories and a case montage.
    Report(ReportArgs),
    /// Exhaustive search over batch size, learning rate, epochs and momentum.
    GridSearch(GridArgs),
}

/// Config file and overrides shared by the training commands. Flags win
/// over values in the config file.
#[derive(Args, Debug, Default, Clone)]
pub struct CommonArgs {
    /// JSON run configuration (see README for the schema).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Learning rate (both phases unless --lr-phase2 is given).
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_phase2: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Maximum epochs (both phases unless --epochs-phase2 is given).
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub epochs_phase2: Option<usize>,
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Dilation radius of the local attention mask, in pixels.
    #[arg(long)]
    pub radius: Option<usize>,
    /// Random subset of training slices used per epoch.
    #[arg(long)]
    pub slices_per_epoch: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SynthDataArgs {
    /// Number of cases.
    #[arg(long, default_value_t = 150)]
    pub n: usize,
    /// Phantom seed (overrides `phantom.seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Volume shape D,H,W.
    #[arg(long, value_delimiter = ',')]
    pub shape: Option<Vec<usize>>,
    /// JSON run configuration; only the `phantom` section is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    /// Directory of `<case>_t2.nii[.gz]` and `<case>_seg.nii[.gz]` files.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Crop size H,W (defaults to the architecture input size).
    #[arg(long, value_delimiter = ',')]
    pub size: Option<Vec<usize>>,
    /// Also write attention maps dilated by this radius.
    #[arg(long)]
    pub radius: Option<usize>,
    /// Split fractions TRAIN,VAL,TEST.
    #[arg(long, value_delimiter = ',', default_value = "0.83,0.11,0.06")]
    pub split: Vec<f64>,
    /// Seed of the split assignment.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub phase: u8,
    /// Run directory for checkpoints and logs.
    #[arg(long)]
    pub out: PathBuf,
    /// Phase-1 checkpoint stem to start phase 2 from
    /// (default: <out>/phase1_best).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Continue an interrupted phase from <out>/phase<N>_last.
    #[arg(long = "continue")]
    pub continue_run: bool,
    /// Phase 2 supervises the decoder with plain reconstruction.
    #[arg(long)]
    pub no_local_mask: bool,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Checkpoint stem (without extension).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Output directory (default: `eval` next to the checkpoint).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Preprocessed T2 volume.
    #[arg(long)]
    pub input: PathBuf,
    /// Output binary segmentation volume.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the probability volume here.
    #[arg(long)]
    pub save_prob: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Dilation radii.
    #[arg(long, value_delimiter = ',', default_value = "0,5,10,15,20")]
    pub radii: Vec<usize>,
    /// Skip the no-mask control.
    #[arg(long)]
    pub no_control: bool,
    /// Reuse this phase-1 checkpoint instead of training one.
    #[arg(long)]
    pub phase1: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Training run directory.
    #[arg(long)]
    pub run: PathBuf,
    /// Output directory (default: <run>/report).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Manifest for the montage (default: from the run's config).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Checkpoint for the montage (default: <run>/phase2_best).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dilation radius of the montage attention maps.
    #[arg(long)]
    pub radius: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Args, Debug)]
pub struct GridArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub batch_sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub learning_rates: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub max_epochs: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub momenta: Vec<f64>,
    #[command(flatten)]
    pub common: CommonArgs,
}
