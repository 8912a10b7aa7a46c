use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sparse_tune::engine::{Budget, MaskStrategy};
use sparse_tune::synth::TaskKind;

#[derive(Debug, Parser)]
#[command(
    name = "sparse-tune",
    version,
    about = "Composable sparse fine-tuning on synthetic languages"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the language suite, corpora and task data.
    GenData(Common),
    /// Pretrain the base model on every pretraining corpus.
    Pretrain(Common),
    /// Train a language SFT with masked language modelling.
    TrainLang(TrainLang),
    /// Train a task SFT on one or more source languages.
    TrainTask(TrainTask),
    /// Apply a task SFT and a target-language SFT to the base model.
    Compose(Compose),
    /// Score a task SFT, composed on the fly or precomposed, on a language.
    Eval(Eval),
    /// Task density by language density grid.
    SweepDensity(Common),
    /// Pairwise overlap of language SFT masks.
    Overlap(Overlap),
    /// Summarize an SFT file.
    InspectSft(Inspect),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Pretrain(_) => "pretrain",
            Command::TrainLang(_) => "train-lang",
            Command::TrainTask(_) => "train-task",
            Command::Compose(_) => "compose",
            Command::Eval(_) => "eval",
            Command::SweepDensity(_) => "sweep-density",
            Command::Overlap(_) => "overlap",
            Command::InspectSft(_) => "inspect-sft",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::GenData(c) | Command::Pretrain(c) | Command::SweepDensity(c) => c,
            Command::TrainLang(a) => &a.common,
            Command::TrainTask(a) => &a.common,
            Command::Compose(a) => &a.common,
            Command::Eval(a) => &a.common,
            Command::Overlap(a) => &a.common,
            Command::InspectSft(a) => &a.common,
        }
    }
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory; overrides `out_dir` from the configuration.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Training {
    /// Phase-2 budget: a count (`1500`), fraction (`0.05`) or percentage (`5%`).
    #[arg(long)]
    pub budget_k: Option<Budget>,
    /// L1 anchor weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, value_enum, default_value_t = Strategy::Lt)]
    pub strategy: Strategy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Strategy {
    Lt,
    Rand,
    Bitfit,
}

impl From<Strategy> for MaskStrategy {
    fn from(s: Strategy) -> Self {
        match s {
            Strategy::Lt => MaskStrategy::LotteryTicket,
            Strategy::Rand => MaskStrategy::RandomK,
            Strategy::Bitfit => MaskStrategy::BiasOnly,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Tagging,
    Agreement,
}

impl From<Task> for TaskKind {
    fn from(t: Task) -> Self {
        match t {
            Task::Tagging => TaskKind::CategoryTagging,
            Task::Agreement => TaskKind::AgreementDetection,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainLang {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub training: Training,
    /// Language tag from the generated suite.
    #[arg(long)]
    pub lang: String,
}

#[derive(Debug, Args)]
pub struct TrainTask {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub training: Training,
    #[arg(long, value_enum, default_value_t = Task::Tagging)]
    pub task: Task,
    /// Source language; required unless two or more source SFTs are given.
    #[arg(long)]
    pub lang: Option<String>,
    /// Source-language SFT applied during training. Repeat for multi-source training.
    #[arg(long)]
    pub source_sft: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Target {
    #[arg(long)]
    pub task_sft: PathBuf,
    /// Target-language SFT composed with the task SFT.
    #[arg(long, required_unless_present = "ta_only")]
    pub target_sft: Option<PathBuf>,
    /// Apply the task SFT alone.
    #[arg(long, conflicts_with = "target_sft")]
    pub ta_only: bool,
}

#[derive(Debug, Args)]
pub struct Compose {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub target: Target,
}

#[derive(Debug, Args)]
pub struct Eval {
    #[command(flatten)]
    pub common: Common,
    /// Evaluation language.
    #[arg(long)]
    pub lang: String,
    #[arg(long, conflicts_with_all = ["task_sft", "target_sft", "ta_only"])]
    pub composed: Option<PathBuf>,
    #[arg(long, required_unless_present = "composed")]
    pub task_sft: Option<PathBuf>,
    #[arg(long)]
    pub target_sft: Option<PathBuf>,
    #[arg(long, conflicts_with = "target_sft")]
    pub ta_only: bool,
}

#[derive(Debug, Args)]
pub struct Overlap {
    #[command(flatten)]
    pub common: Common,
    /// Language SFTs to compare; defaults to every `langs/*.sft` in the run directory.
    pub sfts: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Inspect {
    #[command(flatten)]
    pub common: Common,
    pub sft: PathBuf,
}
