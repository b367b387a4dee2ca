use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Architecture search with a recurrent controller trained by policy
/// gradients, random-search baselines and report tooling.
#[derive(Debug, Parser)]
#[command(name = "nasforge", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Experiment config file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Single seed; replaces the config's seed list.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Serialize message delivery on a seeded order so runs replay exactly.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Output directory; replaces the config's.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Continue from the last checkpoint of an existing log.
    #[arg(long, global = true)]
    pub resume: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a controller search.
    Search(SearchArgs),
    /// Evaluate uniformly sampled architectures with the same budget.
    Randsearch(SearchArgs),
    /// Windowed top-k difference between a search log and a random log.
    Compare(CompareArgs),
    /// Compile a description and print the graph.
    Compile(CompileArgs),
    /// Grid search over training settings for one description.
    Grid(GridArgs),
    /// List built-in tasks.
    Tasks,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    /// Task name; used when no config file is given.
    #[arg(long)]
    pub task: Option<String>,
    /// Total samples; replaces the config's.
    #[arg(long)]
    pub budget: Option<u64>,
    /// Also emit the greedy decode of the final controller.
    #[arg(long)]
    pub greedy_final: bool,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    pub nas_log: PathBuf,
    pub random_log: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 400)]
    pub window: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Reference {
    Lstm,
    TanhRnn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Target {
    /// One cell step (cells) or the full network (conv).
    Step,
    /// A cell unrolled into a language model.
    Sequence,
}

#[derive(Debug, Args)]
pub struct CompileArgs {
    /// Description file.
    #[arg(required_unless_present = "reference")]
    pub file: Option<PathBuf>,
    /// Compile a built-in reference cell instead of a file.
    #[arg(long, value_enum, conflicts_with = "file")]
    pub reference: Option<Reference>,
    #[arg(long, value_enum, default_value_t = Target::Step)]
    pub target: Target,
    /// Run finite-difference gradient checks on the compiled graph.
    #[arg(long)]
    pub check_grad: bool,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    /// Conv input as HxWxC.
    #[arg(long, default_value = "8x8x3")]
    pub image: String,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 4)]
    pub input_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub hidden: usize,
    /// Vocabulary and unroll length for the sequence target.
    #[arg(long, default_value_t = 5)]
    pub vocab: usize,
    #[arg(long, default_value_t = 4)]
    pub length: usize,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// Description file.
    pub desc: PathBuf,
    /// Grid file.
    #[arg(long)]
    pub grid: PathBuf,
    /// Task name; used when no config file is given.
    #[arg(long)]
    pub task: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
