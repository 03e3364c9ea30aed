use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use netml_core::dataset::Level;

use crate::commands::ModelKind;
use crate::config::CONFIG_ENV;

#[derive(Debug, Parser)]
#[command(name = "netml", version, about = "Flow extraction, dataset preparation and traffic classification")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// Worker threads. Training and evaluation are bit-exact only with 1.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Capture files to JSON-lines flow records.
    Extract(ExtractArgs),
    /// Label, mask and split records into train / test-std / test-challenge.
    Prepare(PrepareArgs),
    /// Fit a model on a labeled records file.
    Train(TrainArgs),
    /// Score checkpoints on labeled records and write the scenario report.
    Evaluate(EvaluateArgs),
    /// Label records with a checkpoint.
    Predict(PredictArgs),
    /// Class counts of labeled records.
    Stats(StatsArgs),
    /// Finite-difference check of every layer type.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    pub captures: Vec<PathBuf>,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub idle_timeout: Option<f64>,
    #[arg(long)]
    pub packet_cap: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Records files from `extract`.
    #[arg(short, long = "records")]
    pub records: Vec<PathBuf>,
    #[arg(short, long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Secret for address pseudonyms.
    #[arg(long)]
    pub salt: Option<String>,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(short, long)]
    pub train: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub model: ModelKind,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Label level for the single-task baselines.
    #[arg(long)]
    pub level: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    /// MLP hidden widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(short, long = "checkpoint")]
    pub checkpoints: Vec<PathBuf>,
    #[arg(short, long)]
    pub eval: Option<PathBuf>,
    /// Withheld-labels file from `prepare`.
    #[arg(short, long)]
    pub labels: Option<PathBuf>,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Dataset expected in the report; repeatable.
    #[arg(long = "dataset")]
    pub datasets: Vec<String>,
    /// Training records for kNN checkpoints, instead of the stored path.
    #[arg(long)]
    pub train_ref: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(short, long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(short, long)]
    pub input: Option<PathBuf>,
    /// Predictions file (JSON lines).
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub train_ref: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(short, long = "records")]
    pub records: Vec<PathBuf>,
    #[arg(short, long)]
    pub labels: Option<PathBuf>,
    /// One level only; default prints every labeled level.
    #[arg(long, value_enum)]
    pub level: Option<LevelArg>,
    /// Write the table here instead of standard output.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum LevelArg {
    Top,
    Mid,
    Fine,
}

impl From<LevelArg> for Level {
    fn from(l: LevelArg) -> Level {
        match l {
            LevelArg::Top => Level::Top,
            LevelArg::Mid => Level::Mid,
            LevelArg::Fine => Level::Fine,
        }
    }
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    /// Write the table here as well as to standard output.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}
