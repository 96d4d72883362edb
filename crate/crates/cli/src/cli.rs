use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use spikequant::model::{BotSpike, SpikeInjection};
use spikequant::{Granularity, HighPrecision, SiteKind};

#[derive(Debug, Parser)]
#[command(name = "spikequant", version, about = "Spike-aware mixed-precision quantization toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic model, optionally with injected spikes.
    Synth(SynthArgs),
    /// Profile activations and write a spike report.
    Profile(ProfileArgs),
    /// Build a precision plan from a spike report.
    Plan(PlanArgs),
    /// Store static activation scales in a model container.
    Calibrate(CalibrateArgs),
    /// Evaluate a plan against the full-precision model.
    Eval(EvalArgs),
    /// Tabulate metrics files as CSV.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 172)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 256)]
    pub vocab: usize,
    #[arg(long, default_value_t = 2048)]
    pub max_context: usize,
    /// Spike injection `layer=L,kind=K,channel=C,scale=S`; repeatable.
    #[arg(long, value_parser = parse_injection)]
    pub inject: Vec<SpikeInjection>,
    /// BOT-token spike `channel=C,scale=S`.
    #[arg(long, value_parser = parse_bot)]
    pub bot_spike: Option<BotSpike>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
#[group(required = true, multiple = false)]
pub struct TokenSource {
    /// Whitespace-separated token ids.
    #[arg(long)]
    pub tokens: Option<PathBuf>,
    /// Seeded pseudo-random stream (BOT first, then uniform ids).
    #[arg(long)]
    pub seed_stream: Option<u64>,
    /// The bundled byte-level text corpus.
    #[arg(long)]
    pub corpus: bool,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub source: TokenSource,
    /// Stream length for `--seed-stream` and `--corpus`.
    #[arg(long, default_value_t = 128)]
    pub len: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for per-kind max-abs curves.
    #[arg(long)]
    pub curves: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HighArg {
    Fp16,
    Fp8e5m2,
    Fp8e4m3,
}

impl From<HighArg> for HighPrecision {
    fn from(h: HighArg) -> Self {
        match h {
            HighArg::Fp16 => HighPrecision::Fp16,
            HighArg::Fp8e5m2 => HighPrecision::Fp8E5M2,
            HighArg::Fp8e4m3 => HighPrecision::Fp8E4M3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GranularityArg {
    PerTensor,
    PerToken,
}

impl From<GranularityArg> for Granularity {
    fn from(g: GranularityArg) -> Self {
        match g {
            GranularityArg::PerTensor => Granularity::PerTensor,
            GranularityArg::PerToken => Granularity::PerToken,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScaleArg {
    Dynamic,
    Static,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, default_value_t = 100.0)]
    pub theta: f32,
    #[arg(long, value_enum, default_value_t = HighArg::Fp16)]
    pub high: HighArg,
    #[arg(long, default_value_t = 8)]
    pub bits: u8,
    #[arg(long, value_enum, default_value_t = GranularityArg::PerTensor)]
    pub granularity: GranularityArg,
    #[arg(long, value_enum, default_value_t = ScaleArg::Dynamic)]
    pub scale: ScaleArg,
    /// Quantize activations only, leaving weights in full precision.
    #[arg(long)]
    pub no_weights: bool,
    /// Leave this token row unquantized and out of the scales.
    #[arg(long)]
    pub exclude_token: Option<usize>,
    /// Uniform int(b) everywhere in scope.
    #[arg(long, conflicts_with_all = ["full", "random"])]
    pub uniform: bool,
    /// Full precision everywhere.
    #[arg(long, conflicts_with = "random")]
    pub full: bool,
    /// Random placement with the same site count as `--reference`.
    #[arg(long, requires_all = ["seed", "reference"])]
    pub random: bool,
    #[arg(long, requires = "random")]
    pub seed: Option<u64>,
    #[arg(long, requires = "random")]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub source: TokenSource,
    #[arg(long, default_value_t = 128)]
    pub len: usize,
    #[arg(long, default_value_t = 8)]
    pub bits: u8,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub plan: PathBuf,
    #[command(flatten)]
    pub source: TokenSource,
    #[arg(long, default_value_t = 128)]
    pub len: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub metrics: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn fields(s: &str) -> Result<Vec<(&str, &str)>, String> {
    s.split(',')
        .map(|kv| kv.split_once('=').ok_or_else(|| format!("expected key=value, got `{kv}`")))
        .collect()
}

fn number<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("bad value for {key}: `{v}`"))
}

pub fn parse_injection(s: &str) -> Result<SpikeInjection, String> {
    let (mut layer, mut kind, mut channel, mut scale) = (None, None, None, None);
    for (k, v) in fields(s)? {
        match k {
            "layer" => layer = Some(number(k, v)?),
            "kind" => kind = Some(v.parse::<SiteKind>().map_err(|e| e.to_string())?),
            "channel" => channel = Some(number(k, v)?),
            "scale" => scale = Some(number(k, v)?),
            _ => return Err(format!("unknown injection key `{k}`")),
        }
    }
    match (layer, kind, channel, scale) {
        (Some(layer), Some(kind), Some(channel), Some(scale)) => Ok(SpikeInjection { layer, kind, channel, scale }),
        _ => Err("injection needs layer, kind, channel and scale".into()),
    }
}

pub fn parse_bot(s: &str) -> Result<BotSpike, String> {
    let (mut channel, mut scale) = (None, None);
    for (k, v) in fields(s)? {
        match k {
            "channel" => channel = Some(number(k, v)?),
            "scale" => scale = Some(number(k, v)?),
            _ => return Err(format!("unknown BOT spike key `{k}`")),
        }
    }
    match (channel, scale) {
        (Some(channel), Some(scale)) => Ok(BotSpike { channel, scale }),
        _ => Err("BOT spike needs channel and scale".into()),
    }
}
