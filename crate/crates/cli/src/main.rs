use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

mod config;
mod data;
mod evaluate;
mod learn;

use config::Config;

#[derive(Debug, Parser)]
#[command(name = "trajgen", version, about = "Camera trajectory preprocessing, tokenization, training, generation and evaluation")]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true, env = "TRAJGEN_CONFIG")]
    config: Option<PathBuf>,

    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// More diagnostics on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a procedural dataset with a manifest.
    Synth(SynthArgs),
    /// Clean, smooth and resample a raw trajectory into one file per kept segment.
    Preprocess(PreprocessArgs),
    /// Per-segment motion tags as JSON lines.
    Tag(TagArgs),
    /// Caption text for a trajectory.
    Caption(CaptionArgs),
    /// Trajectories to token lines.
    Tokenize(TokenizeArgs),
    /// Token lines back to trajectories.
    Detokenize(DetokenizeArgs),
    /// Train a model from a dataset manifest.
    Train(TrainArgs),
    /// Sample trajectories from a checkpoint.
    Generate(GenerateArgs),
    /// Score generated trajectories against a dataset split.
    Evaluate(EvaluateArgs),
    /// Convert a trajectory to CSV or a PLY polyline.
    Export(ExportArgs),
    /// Fit the caption/trajectory contrastive head used by the `clip` metric.
    ClipTrain(ClipTrainArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory; receives manifest.json, trajectories/ and frames/.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    /// Poses per trajectory.
    #[arg(long)]
    frames: Option<usize>,
    /// Side of the procedural image/depth frames; 0 disables them.
    #[arg(long)]
    frame_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InputFormat {
    /// `.tum`/`.txt` as TUM, anything else as native JSON lines.
    Auto,
    Tum,
    Native,
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = InputFormat::Auto)]
    format: InputFormat,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    percentile: Option<f64>,
    #[arg(long)]
    min_segment: Option<usize>,
    /// Process and measurement noise, e.g. `0.5,1.0`.
    #[arg(long, value_delimiter = ',')]
    kalman_sigmas: Option<Vec<f64>>,
    /// Resample each segment to this many poses.
    #[arg(long)]
    resample: Option<usize>,
}

#[derive(Debug, Args)]
struct TagArgs {
    input: PathBuf,
    /// Tag file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Style {
    Sentence,
    Terse,
}

#[derive(Debug, Args)]
struct CaptionArgs {
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = Style::Sentence)]
    style: Style,
}

#[derive(Debug, Args)]
struct CodecArgs {
    /// Quantization bins.
    #[arg(long)]
    bins: Option<u32>,
    /// Poses per sequence.
    #[arg(long)]
    len: Option<usize>,
}

#[derive(Debug, Args)]
struct TokenizeArgs {
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Token file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    codec: CodecArgs,
}

#[derive(Debug, Args)]
struct DetokenizeArgs {
    input: PathBuf,
    /// Output file; the token file must hold exactly one line.
    #[arg(long, conflicts_with = "out_dir", required_unless_present = "out_dir")]
    out: Option<PathBuf>,
    /// Output directory; line k goes to `seq_<k>.jsonl`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    codec: CodecArgs,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Receives model.ckpt and loss.csv.
    #[arg(long)]
    out_dir: PathBuf,
    /// Seeds initialization and data order.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Stop early once the mean cross-entropy reaches this value.
    #[arg(long)]
    target_ce: Option<f64>,
    /// Condition on the first image and depth frame as well as the caption.
    #[arg(long)]
    rgbd: bool,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Save a resumable checkpoint every K epochs (0 = only at the end).
    #[arg(long, default_value_t = 10)]
    checkpoint_every: usize,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    caption: Option<String>,
    /// Generate one trajectory per record of `--split`, named by record id.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test, requires = "manifest")]
    split: SplitArg,
    /// First image and depth frame (binary PGM).
    #[arg(long, num_args = 2, value_names = ["IMAGE", "DEPTH"], requires = "caption")]
    rgbd: Option<Vec<PathBuf>>,
    /// greedy, top-k:K or nucleus:P.
    #[arg(long)]
    sampler: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Samples per caption.
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// A file for one caption and one sample, otherwise a directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for trajgen_core::synth::Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Self::Train,
            SplitArg::Val => Self::Val,
            SplitArg::Test => Self::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
enum Metric {
    F1,
    Fid,
    Coverage,
    Clip,
}

impl Metric {
    fn name(self) -> &'static str {
        match self {
            Metric::F1 => "f1",
            Metric::Fid => "fid",
            Metric::Coverage => "coverage",
            Metric::Clip => "clip",
        }
    }
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Manifest of the reference dataset.
    #[arg(long)]
    real: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Directory of generated trajectory files; `<record id>.jsonl` pairs
    /// a file with its reference for f1 and clip.
    #[arg(long)]
    gen: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "f1,fid,coverage")]
    metrics: Vec<Metric>,
    /// Neighbourhood size for coverage.
    #[arg(long, default_value_t = trajgen_core::metrics::DEFAULT_COVERAGE_K)]
    k: usize,
    /// Contrastive head from `clip-train` (needed for clip).
    #[arg(long)]
    clip_head: Option<PathBuf>,
    /// Checkpoint whose text encoder embeds captions (needed for clip).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Report file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ExportFormat {
    Csv,
    PlyPolyline,
}

#[derive(Debug, Args)]
struct ExportArgs {
    input: PathBuf,
    #[arg(long, value_enum)]
    format: ExportFormat,
    /// Output file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ClipTrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
}

/// An empty result or a failed precondition: exit code 2 rather than 1.
#[derive(Debug)]
pub struct Shortfall(pub String);

impl fmt::Display for Shortfall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Shortfall {}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    let cfg = Config::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => data::synth(&cfg, a),
        Command::Preprocess(a) => data::preprocess(&cfg, a),
        Command::Tag(a) => data::tag(&cfg, a),
        Command::Caption(a) => data::caption(&cfg, a),
        Command::Tokenize(a) => data::tokenize(&cfg, a),
        Command::Detokenize(a) => data::detokenize(&cfg, a),
        Command::Export(a) => data::export(a),
        Command::Train(a) => learn::train(&cfg, a),
        Command::Generate(a) => learn::generate(&cfg, a),
        Command::ClipTrain(a) => learn::clip_train(&cfg, a),
        Command::Evaluate(a) => evaluate::evaluate(&cfg, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Shortfall>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
