//! Command-line grammar.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vidguard_core::engine::AttentionMode;
use vidguard_core::pipeline::DEFAULT_PRUNE_RATIO;
use vidguard_core::sampler::SamplerParams;

#[derive(Debug, Parser)]
#[command(name = "vidguard", version, about = "Policy-parallel video guardrail toolkit")]
pub struct Cli {
    /// Seed for every random stream; overrides the seed in the model config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads. Results do not depend on this value.
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(1..))]
    pub jobs: Option<u32>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split a frame directory into events.
    Segment(SegmentArgs),
    /// Check a video against a policy set.
    Guardrail(GuardrailArgs),
    /// Score predictions against labels.
    Eval(EvalArgs),
    /// Analytic FLOPs of one token layout.
    Flops(FlopsArgs),
    /// Prune-ratio sweep over a planted suite.
    Sweep(SweepArgs),
    /// Correlation of policy relevance with position and category.
    CorrelationStudy(CorrelationArgs),
    /// Multi-agent annotation of video batches.
    Annotate(AnnotateArgs),
    /// Write a synthetic fixture to disk.
    Fixture(FixtureArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Pepe,
    Sequential,
}

impl From<ModeArg> for AttentionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Pepe => AttentionMode::Pepe,
            ModeArg::Sequential => AttentionMode::Sequential,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Emit {
    Json,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FixtureKind {
    Planted,
    TwoTone,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Model config file. Defaults to the built-in config.
    #[arg(long, env = "VIDGUARD_CONFIG", value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SamplerArgs {
    /// Frame dissimilarity above which a new event starts.
    #[arg(long, default_value_t = SamplerParams::default().threshold)]
    pub threshold: f64,
    /// Minimum event length in frames.
    #[arg(long, default_value_t = SamplerParams::default().min_len)]
    pub min_len: usize,
}

impl SamplerArgs {
    pub fn params(&self) -> SamplerParams {
        SamplerParams {
            threshold: self.threshold,
            min_len: self.min_len,
        }
    }
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long, value_name = "DIR")]
    pub frames: PathBuf,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GuardrailArgs {
    #[arg(long, value_name = "DIR")]
    pub frames: PathBuf,
    /// Guideline text or its JSON form.
    #[arg(long, value_name = "FILE")]
    pub policies: PathBuf,
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long, default_value_t = DEFAULT_PRUNE_RATIO)]
    pub prune_ratio: f64,
    /// Flag threshold on policy evidence. Defaults to min(1.5 / n, 1).
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, value_enum, default_value_t = ModeArg::Pepe)]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value_t = Emit::Json)]
    pub emit: Emit,
    /// Score tokens by raw score ratios instead of a softmax over policies.
    #[arg(long)]
    pub pap_raw_scores: bool,
    #[arg(long)]
    pub query: Option<String>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    /// JSON endpoint descriptor `{"url", "timeout_ms"}`; delegates the check
    /// to that endpoint.
    #[arg(long, value_name = "FILE")]
    pub endpoint: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// JSONL of `{id, flags, score?}`, or full labelled predictions when
    /// `--labels` is absent.
    #[arg(long, value_name = "FILE")]
    pub predictions: PathBuf,
    /// JSONL of `{id, flags}`.
    #[arg(long, value_name = "FILE")]
    pub labels: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// JSON `{video_tokens, policy_chunk_lengths, query_tokens}`.
    #[arg(long, value_name = "FILE")]
    pub layout: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    pub prune_ratio: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Pepe)]
    pub mode: ModeArg,
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SuiteArgs {
    /// Single-layer model config. Defaults to the planted fixture config.
    #[arg(long, env = "VIDGUARD_CONFIG", value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub policies: Option<PathBuf>,
    #[arg(long)]
    pub events: Option<usize>,
    #[arg(long)]
    pub frame_size: Option<u32>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.4,0.9,0.95,0.99")]
    pub prune_ratios: Vec<f64>,
    #[arg(long, default_value_t = 12)]
    pub instances: usize,
    #[command(flatten)]
    pub suite: SuiteArgs,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, value_enum, default_value_t = ModeArg::Pepe)]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value_t = Emit::Json)]
    pub emit: Emit,
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CorrelationArgs {
    #[arg(long, default_value_t = 200)]
    pub instances: usize,
    #[command(flatten)]
    pub suite: SuiteArgs,
    #[arg(long, value_enum, default_value_t = Emit::Json)]
    pub emit: Emit,
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    /// JSON batch, or `{"batches": [...]}`.
    #[arg(long, value_name = "MANIFEST")]
    pub batch: PathBuf,
    /// JSON `{"agents": [...], "judge": {...}}`.
    #[arg(long, value_name = "CONFIG")]
    pub agents: PathBuf,
    #[arg(long, default_value_t = vidguard_core::annotator::DEFAULT_MAX_ITERS)]
    pub max_iters: usize,
    /// Fraction of each batch shown to the verifier.
    #[arg(long, default_value_t = vidguard_core::annotator::DEFAULT_SAMPLE_FRACTION)]
    pub sample: f64,
    /// `auto` or `file:PATH`.
    #[arg(long, default_value = "auto")]
    pub verifier: String,
    #[arg(long, value_name = "FILE")]
    pub policies: Option<PathBuf>,
    /// Directory for annotations.jsonl, stats.json and transcripts.jsonl.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[arg(value_enum)]
    pub kind: FixtureKind,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Planted policy index.
    #[arg(long, default_value_t = 0)]
    pub policy: usize,
    #[arg(long, default_value_t = 3)]
    pub events: usize,
    #[arg(long, default_value_t = 3)]
    pub frames_per_event: usize,
    #[arg(long, default_value_t = 32)]
    pub frame_size: u32,
}
