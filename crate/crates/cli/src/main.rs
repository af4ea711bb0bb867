use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (adapter format v1, manifest schema v1)");

/// Budgeted continual merging of low-rank adapters.
#[derive(Debug, Parser)]
#[command(name = "kmerge", version = VERSION)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic adapter suite.
    Gen(GenArgs),
    /// Print the merge threshold: median pairwise similarity of a held-out set.
    Calibrate(CalibrateArgs),
    /// Stream a suite through the engine and write score reports.
    Run(RunArgs),
    /// K-Merge++ final score and consistency over a range of thresholds.
    Sweep(SweepArgs),
    /// Merge two adapter files with one operator.
    Merge(MergeArgs),
    /// Pairwise similarity matrix of a suite.
    Sim(SimArgs),
    /// Which slot serves a task in a persisted store.
    Route(RouteArgs),
    /// Describe a store, an adapter file, or a model geometry.
    Inspect(InspectArgs),
    /// Integration time per ingest against the number of occupied slots.
    Timing(TimingArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long, default_value_t = 5)]
    alpha: usize,
    #[arg(long, default_value_t = 8)]
    beta: usize,
    #[arg(long, default_value_t = 4)]
    rank: usize,
    #[arg(long, default_value_t = 4)]
    layers: u32,
    /// Input and output width of every projection.
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 16.0)]
    scale: f64,
    #[arg(long, default_value_t = 1.0)]
    type_strength: f64,
    #[arg(long, default_value_t = 0.5)]
    lang_strength: f64,
    #[arg(long, default_value_t = 0.25)]
    noise_strength: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the small calibration set instead of the task grid.
    #[arg(long)]
    held_out: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// Directory of held-out `.kmrg` adapters.
    dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    KMerge,
    KMergePp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OperatorArg {
    RunningAverage,
    Linear,
    Ties,
    Dare,
    DareTies,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RankModeArg {
    Svd,
    FactorAverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OrderingArg {
    Random,
    ProblemTypes,
    Worst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AssignmentArg {
    MostSimilar,
    Random,
}

/// Operator hyper-parameters shared by `run`, `sweep` and `merge`.
#[derive(Debug, Clone, Args)]
struct OperatorFlags {
    #[arg(long, default_value_t = 0.5)]
    density: f64,
    #[arg(long, default_value_t = 0.5)]
    drop_rate: f64,
    /// Weight of the stored (first) operand for linear merging.
    #[arg(long, default_value_t = 0.5)]
    weight: f64,
    #[arg(long, default_value_t = 0)]
    op_seed: u64,
}

#[derive(Debug, Clone, Args)]
struct PolicyFlags {
    /// Slot budgets; several values run one cell per budget.
    #[arg(long, value_delimiter = ',', required_unless_present = "config")]
    k: Vec<usize>,
    #[arg(long, value_enum, default_value = "k-merge")]
    variant: VariantArg,
    #[arg(long, conflicts_with = "calibrate_dir")]
    threshold: Option<f64>,
    /// Calibrate the threshold from this held-out directory.
    #[arg(long)]
    calibrate_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "running-average")]
    operator: OperatorArg,
    #[command(flatten)]
    op: OperatorFlags,
    /// Stored adapter rank; defaults to the suite's rank.
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long, value_enum, default_value = "svd")]
    rank_mode: RankModeArg,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Suite directory written by `gen`.
    #[arg(long)]
    suite: PathBuf,
    #[command(flatten)]
    policy: PolicyFlags,
    /// Policy as JSON in the manifest schema, instead of the policy flags.
    #[arg(long, conflicts_with_all = ["k", "threshold", "calibrate_dir", "rank"])]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "random")]
    ordering: OrderingArg,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long, value_enum, default_value = "most-similar")]
    assignment: AssignmentArg,
    #[arg(long, default_value_t = 0)]
    assignment_seed: u64,
    /// Persist the final engine state of every cell here.
    #[arg(long)]
    store_dir: Option<PathBuf>,
    /// Run independent (K, seed) cells concurrently.
    #[arg(long)]
    parallel: bool,
    /// Record wall-clock ingest times (reports are then not reproducible).
    #[arg(long)]
    timing: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    suite: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long, value_delimiter = ',', required = true)]
    thresholds: Vec<f64>,
    #[arg(long, value_enum, default_value = "random")]
    ordering: OrderingArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    rank: Option<usize>,
    /// Write the rows as CSV here instead of printing them.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MergeArgs {
    #[arg(long, value_enum)]
    op: OperatorArg,
    #[command(flatten)]
    flags: OperatorFlags,
    /// Output rank; defaults to the sum of the input ranks, capped by the layer width.
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long, default_value = "merged")]
    task_id: String,
    first: PathBuf,
    second: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SimArgs {
    /// Suite directory or directory of `.kmrg` files.
    dir: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RouteArgs {
    #[arg(long)]
    store: PathBuf,
    /// 1-based task index, or a task id.
    #[arg(long)]
    task: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModulesArg {
    Attention,
    AllLinear,
}

#[derive(Debug, Args)]
struct InspectArgs {
    /// A store directory or a `.kmrg` file.
    #[arg(required_unless_present = "geometry", conflicts_with = "geometry")]
    path: Option<PathBuf>,
    /// Model geometry preset, for example `llama-3.2-1b`.
    #[arg(long)]
    geometry: Option<String>,
    #[arg(long, default_value_t = 32)]
    rank: usize,
    #[arg(long, default_value_t = 128.0)]
    scale: f64,
    /// Adapted modules; both are reported when omitted.
    #[arg(long, value_enum)]
    modules: Option<ModulesArg>,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct TimingArgs {
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    slots: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Use the small default suite shapes instead of the full-size ones.
    #[arg(long)]
    small: bool,
    #[arg(long)]
    json: bool,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|cause| {
        cause
            .downcast_ref::<kmerge::Error>()
            .is_some_and(kmerge::Error::is_config)
            || cause.downcast_ref::<commands::UsageError>().is_some()
    });
    if config {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Run(a) => commands::run(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Merge(a) => commands::merge(a),
        Command::Sim(a) => commands::sim(a),
        Command::Route(a) => commands::route(a),
        Command::Inspect(a) => commands::inspect(a),
        Command::Timing(a) => commands::timing(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
