mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use foodlens::clusterval::ClusterError;
use foodlens::convnet::ConvError;
use foodlens::pixelio::PixelError;
use foodlens::{FailureKind, LearnError, PipelineError};

#[derive(Parser)]
#[command(
    name = "foodlens",
    version,
    about = "Augment small image datasets, extract CNN features and compare classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract one feature row per manifest image into an FMX1 file.
    Ingest(IngestArgs),
    /// Write 32 augmented variants of every manifest image plus a new manifest.
    Augment(AugmentArgs),
    /// Score k-means clusterings over a range of k by mean silhouette.
    ClusterSweep(ClusterSweepArgs),
    /// Train one classifier and save it as an FMD1 model file.
    Train(TrainArgs),
    /// Report a saved model's accuracy on the held-out split of a feature file.
    Evaluate(EvaluateArgs),
    /// Run the full dataset × classifier grid described by a JSON config.
    Experiment(ExperimentArgs),
    /// Write a procedural ten-class texture corpus with a manifest.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    /// Scale pixels to [0, 1].
    Unit,
    /// Subtract per-channel means (the bundle's own, or ImageNet means).
    Mean,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Tiny,
    #[value(name = "vgg16-64")]
    Vgg16_64,
}

#[derive(Args)]
struct IngestArgs {
    /// JSON manifest listing image paths and labels.
    #[arg(long)]
    manifest: PathBuf,
    /// Feature file to write.
    #[arg(long)]
    out: PathBuf,
    /// FWB1 weight bundle.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    weights: Option<PathBuf>,
    /// Built-in architecture with seeded random weights, instead of --weights.
    #[arg(long)]
    preset: Option<PresetArg>,
    #[arg(long, default_value_t = 0)]
    preset_seed: u64,
    /// Override the bundle's pixel normalization.
    #[arg(long)]
    norm: Option<NormArg>,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for the variants and their manifest.
    #[arg(long)]
    out: PathBuf,
    /// Base seed for salt-and-pepper noise.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ClusterSweepArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value_t = 4)]
    kmin: usize,
    #[arg(long, default_value_t = 12)]
    kmax: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON report with the score for every k.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelKind {
    Svm,
    Gbdt,
    Mlp,
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelArg {
    Rbf,
    Linear,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutputArg {
    Softmax,
    ReluRegression,
}

#[derive(Args)]
struct SplitArgs {
    /// Fraction of rows held out for testing.
    #[arg(long, default_value_t = 0.2)]
    split: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// FMX1 feature file.
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    model: ModelKind,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    /// Train on every row instead of the training split.
    #[arg(long)]
    all_rows: bool,
    /// Skip per-column z-scoring of the features.
    #[arg(long)]
    no_standardize: bool,

    /// SVM box constraint.
    #[arg(long, default_value_t = 10.0, help_heading = "SVM")]
    c: f64,
    #[arg(long, value_enum, default_value_t = KernelArg::Rbf, help_heading = "SVM")]
    kernel: KernelArg,
    /// RBF width; defaults to the variance-scaled width of the training rows.
    #[arg(long, help_heading = "SVM")]
    sigma: Option<f64>,
    /// Choose C by k-fold search over this comma-separated grid.
    #[arg(long, value_delimiter = ',', help_heading = "SVM")]
    c_grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = 5, help_heading = "SVM")]
    folds: usize,

    #[arg(long, default_value_t = 100, help_heading = "GBDT")]
    rounds: usize,
    /// Shrinkage for GBDT, step size for MLP (defaults 0.1 and 0.05).
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long, default_value_t = 4, help_heading = "GBDT")]
    max_depth: usize,
    #[arg(long, default_value_t = 1.0, help_heading = "GBDT")]
    lambda: f64,
    #[arg(long, default_value_t = 0.0, help_heading = "GBDT")]
    gamma: f64,

    #[arg(long, default_value_t = 50, help_heading = "MLP")]
    epochs: usize,
    #[arg(long, default_value_t = 32, help_heading = "MLP")]
    batch_size: usize,
    /// Two hidden widths, comma-separated.
    #[arg(long, value_delimiter = ',', default_values_t = [512, 128], help_heading = "MLP")]
    hidden: Vec<usize>,
    /// Two dropout rates, comma-separated.
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 0.5], help_heading = "MLP")]
    dropout: Vec<f64>,
    #[arg(long, value_enum, default_value_t = OutputArg::Softmax, help_heading = "MLP")]
    output: OutputArg,
    /// Seed for MLP initialization and shuffling; recorded for GBDT.
    #[arg(long, default_value_t = 0)]
    model_seed: u64,
}

#[derive(Args)]
struct EvaluateArgs {
    /// FMX1 feature file; use the same split settings as for training.
    #[arg(long)]
    features: PathBuf,
    /// Model file written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    /// Score every row rather than the held-out split.
    #[arg(long)]
    all_rows: bool,
    /// Also write the result as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// JSON config; relative paths inside it resolve against its directory.
    #[arg(long)]
    config: PathBuf,
    /// JSON report to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    per_class: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of labels reassigned to a wrong class.
    #[arg(long, default_value_t = 0.0)]
    label_noise: f64,
}

/// Exit status for a failed run: 2 for unreadable input or bad settings,
/// 3 for data that fails validation, 4 for NaN or infinity.
fn exit_status(err: &anyhow::Error) -> u8 {
    let kind = err.chain().find_map(|cause| {
        if let Some(e) = cause.downcast_ref::<PipelineError>() {
            Some(e.kind())
        } else if let Some(e) = cause.downcast_ref::<LearnError>() {
            Some(e.kind())
        } else if let Some(e) = cause.downcast_ref::<ConvError>() {
            Some(e.kind())
        } else if let Some(e) = cause.downcast_ref::<PixelError>() {
            Some(e.kind())
        } else {
            cause.downcast_ref::<ClusterError>().map(ClusterError::kind)
        }
    });
    match kind {
        Some(FailureKind::Data) => 3,
        Some(FailureKind::Numeric) => 4,
        Some(FailureKind::Input) | None => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(a) => commands::ingest(a),
        Command::Augment(a) => commands::augment(a),
        Command::ClusterSweep(a) => commands::cluster_sweep(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Experiment(a) => commands::experiment(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_status(&err))
        }
    }
}
