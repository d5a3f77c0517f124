use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "tiertune", version, about = "Hybrid K-NN / RL tuning of memory-tiering knobs")]
pub struct Cli {
    /// Parameter catalog file; overrides TIERTUNE_CATALOG.
    #[arg(long, global = true)]
    pub catalog: Option<PathBuf>,

    /// More log output on stderr (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a performance database by applying random configs.
    Collect(CollectArgs),
    /// Cluster a database and fit per-cluster feature weights.
    Fit(FitArgs),
    /// Behavioral cloning of the policy on K-NN expert labels.
    Pretrain(PretrainArgs),
    /// Run the online tuning loop.
    Tune(TuneArgs),
    /// Static sensitivity sweep of one simulator knob.
    Sweep(SweepArgs),
}

/// `sim:<scenario>` or `replay:<counters.csv>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EnvSpec {
    Sim(String),
    Replay(PathBuf),
}

impl FromStr for EnvSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            Some(("sim", name)) if !name.is_empty() => Ok(EnvSpec::Sim(name.to_string())),
            Some(("replay", path)) if !path.is_empty() => Ok(EnvSpec::Replay(PathBuf::from(path))),
            _ => Err(format!("expected sim:<scenario> or replay:<file>, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Sim,
    SysfsDryrun,
    SysfsLive,
}

#[derive(Debug, Clone, Args)]
pub struct BackendArgs {
    /// Where configs are applied. Defaults to `sim` for simulator
    /// environments and `sysfs-dryrun` otherwise.
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,

    /// Prefix for live sysfs paths.
    #[arg(long, default_value = "/")]
    pub sysfs_root: PathBuf,

    /// Required before `--backend sysfs-live` writes anything.
    #[arg(long = "i-know-this-writes-sysfs")]
    pub live_ack: bool,

    /// Dry-run write list (CSV with columns path,value).
    #[arg(long)]
    pub writes_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CollectArgs {
    #[arg(long)]
    pub env: EnvSpec,

    /// Catalog solution; defaults to `sim` for simulator environments.
    #[arg(long)]
    pub solution: Option<String>,

    #[arg(long, default_value_t = 3000)]
    pub points: usize,

    /// Interval length (simulator steps or replay rows per interval).
    #[arg(long, default_value_t = 10)]
    pub period: u64,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Seed of the simulated workload.
    #[arg(long, default_value_t = 1)]
    pub scenario_seed: u64,

    #[command(flatten)]
    pub backend: BackendArgs,

    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KChoice {
    Auto,
    Fixed(usize),
}

impl FromStr for KChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "auto" {
            return Ok(KChoice::Auto);
        }
        match s.parse::<usize>() {
            Ok(k) if k >= 1 => Ok(KChoice::Fixed(k)),
            _ => Err(format!("expected auto or a positive integer, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub db: PathBuf,

    #[arg(long, default_value = "auto")]
    pub k: KChoice,

    #[arg(long, default_value_t = 25)]
    pub knn_k: usize,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub db: PathBuf,

    #[arg(long)]
    pub model: PathBuf,

    #[arg(long, default_value_t = 30)]
    pub epochs: usize,

    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,

    #[arg(long, default_value_t = 64)]
    pub batch: usize,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    #[arg(long)]
    pub out_weights: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Hybrid,
    RlOnly,
    KnnOnly,
}

#[derive(Debug, Clone, Args)]
pub struct TuneArgs {
    #[arg(long)]
    pub env: EnvSpec,

    /// Database the model was fit on.
    #[arg(long)]
    pub db: PathBuf,

    #[arg(long)]
    pub model: PathBuf,

    /// Pretrained weights; a freshly initialized agent is used without them.
    #[arg(long)]
    pub weights: Option<PathBuf>,

    #[arg(long, default_value_t = 10)]
    pub period: u64,

    /// Run length in environment units. Defaults to three workload passes
    /// in the simulator and the whole file for replays.
    #[arg(long)]
    pub duration: Option<u64>,

    #[arg(long, default_value_t = 25)]
    pub knn_k: usize,

    #[arg(long, value_enum, default_value = "hybrid")]
    pub mode: ModeArg,

    /// Disable online PPO updates.
    #[arg(long)]
    pub freeze_rl: bool,

    /// Also run the default config for the same duration and report the speedup.
    #[arg(long)]
    pub baseline: bool,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    #[arg(long, default_value_t = 1)]
    pub scenario_seed: u64,

    #[command(flatten)]
    pub backend: BackendArgs,

    /// Run summary (JSON).
    #[arg(long)]
    pub report: PathBuf,

    /// Decision log (JSON lines); defaults to the report path with a
    /// `.jsonl` extension.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub env: EnvSpec,

    #[arg(long)]
    pub param: String,

    #[arg(long, default_value_t = 1)]
    pub scenario_seed: u64,

    #[arg(long)]
    pub out_csv: PathBuf,

    /// gnuplot data file; defaults to the CSV path with a `.dat` extension.
    #[arg(long)]
    pub out_dat: Option<PathBuf>,
}
