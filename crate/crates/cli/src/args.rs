use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "poolingvq", version, about = "Codebook-driven pooling for paired audio/MIDI features")]
pub struct Cli {
    /// Seed for every random choice; overrides the config's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// TOML file with training and dataset settings.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Suppress progress and summary output.
    #[arg(long, short, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Cluster frames from feature files into a codebook.
    InitCodebook(InitCodebookArgs),
    /// Compress a feature file with a codebook.
    Compress(CompressArgs),
    /// Train on a synthetic dataset and write a checkpoint.
    TrainToy(TrainToyArgs),
    /// Evaluate a checkpoint on a split of its synthetic dataset.
    Eval(EvalArgs),
    /// Train one model per (codebook size, seed) and tabulate validation F1.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
pub struct InitCodebookArgs {
    /// Feature files (binary or text).
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,

    /// Number of centers.
    #[arg(long, short)]
    pub size: usize,

    /// Output codebook file.
    #[arg(long, short)]
    pub out: PathBuf,

    /// Maximum frames kept in the initialization buffer.
    #[arg(long, default_value_t = 16_384)]
    pub capacity: usize,

    /// Lloyd iteration cap.
    #[arg(long, default_value_t = 50)]
    pub iters: usize,
}

#[derive(Args, Debug)]
pub struct CompressArgs {
    /// Input feature file.
    pub input: PathBuf,

    /// Codebook file.
    #[arg(long, short)]
    pub codebook: PathBuf,

    /// Output feature file.
    #[arg(long, short)]
    pub out: PathBuf,

    #[arg(long, default_value_t = 5)]
    pub window: usize,

    #[arg(long, default_value_t = 3)]
    pub stride: usize,

    /// Write the per-window pooling plan as a tab-separated table.
    #[arg(long, value_name = "FILE")]
    pub emit_plan: Option<PathBuf>,

    /// Write the text feature format instead of binary.
    #[arg(long)]
    pub text: bool,
}

#[derive(Args, Debug)]
pub struct TrainToyArgs {
    /// Output checkpoint.
    #[arg(long, short)]
    pub out: PathBuf,

    /// Per-epoch metrics table.
    #[arg(long, short)]
    pub metrics: PathBuf,

    /// Overrides the configured epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint written by train-toy.
    pub checkpoint: PathBuf,

    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    pub split: SplitName,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Codebook sizes: absolute counts or percentages of the mean audio
    /// length, e.g. `1,20%,60%,80%,200%`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub sizes: Vec<String>,

    /// Seeds, one run per size per seed. Defaults to five consecutive seeds
    /// starting at the base seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,

    /// Output table.
    #[arg(long, short)]
    pub out: PathBuf,

    /// Worker threads; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
}
