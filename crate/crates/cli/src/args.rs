use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "errata", version, about = "Mine error rubrics from reasoning traces, classify traces, serve rewards")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Label traces by comparing final answers with reference solutions
    Grade(GradeArgs),
    /// Seeded train/validation split
    Split(SplitArgs),
    /// Drop traces whose question plus trace reaches a length limit
    Filter(FilterArgs),
    /// Build a rubric from the incorrect traces of a training set
    Build(BuildArgs),
    /// Classify traces with the rubric or a baseline judge
    Classify(ClassifyArgs),
    /// Score predictions against gold labels
    Eval(EvalArgs),
    /// Run a configuration matrix over one evaluation set
    Ablate(AblateArgs),
    /// Serve the classifier as a reward over HTTP
    Serve(ServeArgs),
    /// Generate a synthetic world with planted errors and a matching script
    Synth(SynthArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Grade(_) => "grade",
            Command::Split(_) => "split",
            Command::Filter(_) => "filter",
            Command::Build(_) => "build",
            Command::Classify(_) => "classify",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
            Command::Serve(_) => "serve",
            Command::Synth(_) => "synth",
        }
    }
}

/// Model access shared by every command that calls a provider.
#[derive(Args, Serialize, Clone)]
pub struct ProviderArgs {
    /// Provider name; defaults to `scripted` when --script is given, else `http`
    #[arg(long)]
    pub provider: Option<String>,
    /// Response script for the scripted provider
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// Maximum in-flight provider calls
    #[arg(long, default_value_t = 8)]
    pub concurrency: usize,
    /// Retries after the first attempt for transient failures
    #[arg(long, default_value_t = 3)]
    pub max_retries: u32,
    /// Provider calls per second
    #[arg(long)]
    pub rate_limit: Option<f64>,
    /// Prompt size limit in characters
    #[arg(long)]
    pub context_chars: Option<usize>,
}

#[derive(Args, Serialize)]
pub struct GradeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Skip malformed lines instead of failing
    #[arg(long)]
    pub permissive: bool,
    #[command(flatten)]
    pub provider: ProviderArgs,
}

#[derive(Args, Serialize)]
pub struct SplitArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    pub ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub train_out: PathBuf,
    #[arg(long)]
    pub val_out: PathBuf,
}

#[derive(ValueEnum, Serialize, Clone, Copy)]
#[serde(rename_all = "lowercase")]
pub enum LengthPreset {
    /// 25,000 characters
    Rl,
    /// 35,000 characters
    Build,
}

#[derive(Args, Serialize)]
pub struct FilterArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Keep records strictly shorter than this many characters
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    pub max_chars: Option<usize>,
    #[arg(long)]
    pub preset: Option<LengthPreset>,
}

#[derive(Args, Serialize)]
pub struct BuildArgs {
    /// Labeled training traces
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Extract from raw traces instead of compressed ones
    #[arg(long)]
    pub no_compress: bool,
    /// Keep original keywords for routing
    #[arg(long)]
    pub no_cluster: bool,
    /// Write build statistics here
    #[arg(long)]
    pub stats: Option<PathBuf>,
    #[command(flatten)]
    pub provider: ProviderArgs,
}

#[derive(Args, Serialize)]
pub struct ClassifyArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Required in rubric mode
    #[arg(long)]
    pub rubric: Option<PathBuf>,
    /// `rubric` or `baseline-0` .. `baseline-5`
    #[arg(long, default_value = "rubric")]
    pub mode: String,
    #[arg(long)]
    pub second_filter: bool,
    /// Classify with a seeded sample of this many items
    #[arg(long)]
    pub rubric_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Skip trace compression before tagging
    #[arg(long)]
    pub no_compress: bool,
    /// Training traces shown as item examples
    #[arg(long)]
    pub exemplars: Option<PathBuf>,
    #[arg(long, default_value_t = errata_core::classifier::DEFAULT_EXCERPT_CHARS)]
    pub excerpt_chars: usize,
    #[command(flatten)]
    pub provider: ProviderArgs,
}

#[derive(Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a BA, S, F0.5 table
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Row label in the table
    #[arg(long, default_value = "predictions")]
    pub name: String,
}

#[derive(Args, Serialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub rubric: PathBuf,
    /// Labeled evaluation traces
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Grid JSON; the standard grid when absent
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Seed for the standard grid
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Training traces, for exemplars and rebuild cells
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Run cells concurrently
    #[arg(long)]
    pub parallel: bool,
    #[command(flatten)]
    pub provider: ProviderArgs,
}

#[derive(ValueEnum, Serialize, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Switch {
    On,
    Off,
}

#[derive(ValueEnum, Serialize, Clone, Copy)]
#[serde(rename_all = "kebab-case")]
pub enum ServeMode {
    Rubric,
    Baseline,
}

#[derive(ValueEnum, Serialize, Clone, Copy)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    All,
    CorrectOnly,
}

#[derive(Args, Serialize)]
pub struct ServeArgs {
    #[arg(long)]
    pub rubric: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, value_enum, default_value = "off")]
    pub penalty: Switch,
    #[arg(long, default_value_t = errata_core::reward::DEFAULT_PENALTY_THRESHOLD)]
    pub penalty_threshold: f64,
    #[arg(long, value_enum, default_value = "all")]
    pub penalty_scope: Scope,
    #[arg(long, value_enum, default_value = "rubric")]
    pub mode: ServeMode,
    /// Training traces shown as item examples
    #[arg(long)]
    pub exemplars: Option<PathBuf>,
    #[command(flatten)]
    pub provider: ProviderArgs,
}

#[derive(Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 6)]
    pub families: usize,
    #[arg(long, default_value_t = 120)]
    pub traces: usize,
    #[arg(long, default_value_t = 0.5)]
    pub incorrect_fraction: f64,
    /// Add a never-extracted family and a correct decoy trace with a marker
    #[arg(long)]
    pub adversarial: bool,
    /// Extract one keyword spelling per family
    #[arg(long)]
    pub no_keyword_variants: bool,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}
