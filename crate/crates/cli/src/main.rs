//! `rvqkit`: train residual quantizers, move between vectors and tokens,
//! inspect code usage, and run the generation simulators.
//!
//! Reports go to standard output as `key: value` lines. Timing goes to
//! standard error so that stdout is reproducible.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

use commands::CliError;

#[derive(Parser, Debug)]
#[command(name = "rvqkit", version, about = "Residual vector quantization toolkit")]
struct Cli {
    /// Worker threads for data-parallel stages. Output does not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a quantizer and write a codebook file.
    Train(TrainArgs),
    /// Map a vector file to a token file.
    Encode(EncodeArgs),
    /// Map a token file back to a vector file.
    Decode(DecodeArgs),
    /// Code usage statistics and a rank-frequency table for one layer.
    Analyze(AnalyzeArgs),
    /// Masked parallel generation with a toy score model.
    MlmSim(MlmSimArgs),
    /// AR + NAR generation with toy models.
    ArnarSim(ArnarSimArgs),
    /// Write synthetic token streams whose first layer uses a fixed code subset.
    SynthTokens(SynthTokensArgs),
    /// Bitrate of an RVQ configuration.
    Bitrate(BitrateArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum SchemeArg {
    Ema,
    EmaRestart,
    Projected,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum InitArg {
    Random,
    Kmeans,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("source").required(true).args(["corpus", "synth"])))]
struct TrainArgs {
    /// Vector file with training latents.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Synthetic corpus, e.g. `mixture:components=512,dims=64,separation=4,count=16384,seed=0`.
    #[arg(long)]
    synth: Option<String>,
    #[arg(long, value_enum, default_value = "ema")]
    scheme: SchemeArg,
    #[arg(long, default_value_t = 8)]
    layers: usize,
    #[arg(long, default_value_t = 1024)]
    codebook_size: usize,
    /// Defaults to the corpus dimension.
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Projected scheme only; defaults to 8.
    #[arg(long)]
    quant_dim: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "random")]
    init: InitArg,
    #[arg(long, default_value_t = 0.99)]
    decay: f64,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 100)]
    restart_period: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EncodeArgs {
    #[arg(long)]
    codebook: PathBuf,
    /// Vector file; each row is one frame.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 50.0)]
    token_rate: f64,
    #[arg(long, default_value = "utt0")]
    id: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long)]
    codebook: PathBuf,
    #[arg(long)]
    tokens: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Text,
    JsonLines,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long, num_args = 1.., required = true)]
    tokens: Vec<PathBuf>,
    /// 1-based layer index.
    #[arg(long, default_value_t = 1)]
    layer: usize,
    #[arg(long, value_enum, default_value = "text")]
    format: ReportFormat,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ScoreModelArg {
    Oracle,
    Uniform,
}

#[derive(Args, Debug)]
struct MlmSimArgs {
    #[arg(long, value_enum, default_value = "oracle")]
    model: ScoreModelArg,
    #[arg(long, default_value_t = 60)]
    frames: usize,
    #[arg(long, default_value_t = 8)]
    layers: usize,
    #[arg(long, default_value_t = 1024)]
    codebook_size: usize,
    #[arg(long, default_value_t = 5)]
    iterations: usize,
    #[arg(long, default_value_t = 5)]
    block_size: usize,
    /// Guidance coefficient range `start:end`.
    #[arg(long, default_value = "0:2")]
    cfg: String,
    /// Skip the unconditional pass and use conditional logits directly.
    #[arg(long)]
    no_cfg: bool,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    prompt_frames: usize,
    /// Oracle logit margin at the hidden codes.
    #[arg(long, default_value_t = 30.0)]
    margin: f64,
    /// Oracle noise seed; defaults to `--seed`.
    #[arg(long)]
    noise_seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the hidden ground-truth grid here.
    #[arg(long)]
    dump_truth: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ArModelArg {
    Oracle,
    Ngram,
    Cycling,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum NarModelArg {
    Oracle,
}

#[derive(Args, Debug)]
struct ArnarSimArgs {
    #[arg(long, value_enum, default_value = "oracle")]
    ar: ArModelArg,
    #[arg(long, value_enum, default_value = "oracle")]
    nar: NarModelArg,
    /// Sampling temperature (presets 1.0, 0.9, 0.8; any positive value works).
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 1500)]
    max_frames: usize,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Token file the n-gram model is trained on.
    #[arg(long)]
    train_tokens: Option<PathBuf>,
    /// Token file whose first-layer codes define the support for the
    /// out-of-support emission rate.
    #[arg(long)]
    support: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    order: usize,
    #[arg(long, default_value_t = 0.01)]
    add_k: f64,
    /// Number of generations, seeded `seed, seed + 1, ...`.
    #[arg(long, default_value_t = 1)]
    utterances: usize,
    #[arg(long, default_value_t = 8)]
    layers: usize,
    #[arg(long, default_value_t = 1024)]
    codebook_size: usize,
    /// Length of the hidden grid for the oracle models.
    #[arg(long, default_value_t = 60)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    prompt_frames: usize,
    #[arg(long, default_value_t = 30.0)]
    margin: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthTokensArgs {
    #[arg(long, default_value_t = 200)]
    utterances: usize,
    #[arg(long, default_value_t = 100)]
    frames: usize,
    #[arg(long, default_value_t = 8)]
    layers: usize,
    #[arg(long, default_value_t = 1024)]
    codebook_size: usize,
    /// Distinct first-layer codes.
    #[arg(long, default_value_t = 700)]
    support_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BitrateArgs {
    #[arg(long)]
    layers: usize,
    #[arg(long)]
    codebook_size: usize,
    #[arg(long)]
    token_rate: f64,
}

fn run(cli: Cli) -> Result<String, CliError> {
    if cli.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Encode(a) => commands::encode(a),
        Command::Decode(a) => commands::decode(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::MlmSim(a) => commands::mlm_sim(a),
        Command::ArnarSim(a) => commands::arnar_sim(a),
        Command::SynthTokens(a) => commands::synth_tokens(a),
        Command::Bitrate(a) => commands::bitrate(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let started = std::time::Instant::now();
    match run(cli) {
        Ok(report) => {
            print!("{report}");
            eprintln!("wall_clock_secs: {:.3}", started.elapsed().as_secs_f64());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
