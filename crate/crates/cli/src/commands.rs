use std::fmt::{self, Display, Write as _};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rvq_core::analytics::{rank_frequency, utilization};
use rvq_core::arnar::{
    generate_text_to_tokens, out_of_support_rate, support_streams, train_ngram_ar, ArModel,
    CyclingAr, GenConfig, NarModel, OracleAr, OracleNar,
};
use rvq_core::formats;
use rvq_core::mlm::{generate_parallel, DecodeSchedule, OracleScoreModel, ScoreModel, UniformScoreModel};
use rvq_core::rvq::{bits_per_code, bitrate_bps};
use rvq_core::training::{make_corpus, train_quantizer, CodebookInit, CorpusSpec, TrainConfig, TrainScheme};
use rvq_core::{Error, TokenFrame, TokenStream};

use crate::{
    AnalyzeArgs, ArModelArg, ArnarSimArgs, BitrateArgs, DecodeArgs, EncodeArgs, InitArg,
    MlmSimArgs, NarModelArg, ReportFormat, SchemeArg, ScoreModelArg, SynthTokensArgs, TrainArgs,
};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::InvalidArgument(_)) => 2,
            CliError::Core(
                Error::NonFinite(_) | Error::Degenerate(_) | Error::EmptyGeneration(_),
            ) => 4,
            CliError::Core(_) => 3,
        }
    }
}

impl Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type CliResult = Result<String, CliError>;

/// Accumulates `key: value` report lines.
#[derive(Default)]
struct Report(String);

impl Report {
    fn kv(&mut self, key: impl Display, value: impl Display) -> &mut Self {
        writeln!(self.0, "{key}: {value}").expect("writing to a String");
        self
    }
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn train(a: TrainArgs) -> CliResult {
    let scheme = match a.scheme {
        SchemeArg::Ema => TrainScheme::Ema,
        SchemeArg::EmaRestart => TrainScheme::EmaRestart,
        SchemeArg::Projected => TrainScheme::Projected,
    };
    if a.quant_dim.is_some() && scheme != TrainScheme::Projected {
        return Err(usage("--quant-dim is only valid with --scheme projected"));
    }
    if a.steps == 0 {
        return Err(usage("--steps must be at least 1"));
    }
    let spec = match (&a.corpus, &a.synth) {
        (Some(p), None) => CorpusSpec::File { path: p.clone() },
        (None, Some(s)) => s
            .parse()
            .map_err(|e: Error| usage(format!("--synth: {e}")))?,
        _ => return Err(usage("give exactly one of --corpus and --synth")),
    };
    let corpus = make_corpus(&spec)?;
    let latent_dim = a.latent_dim.unwrap_or(corpus.ncols());
    if latent_dim != corpus.ncols() {
        return Err(Error::DimensionMismatch {
            expected: latent_dim,
            got: corpus.ncols(),
        }
        .into());
    }
    let config = TrainConfig {
        scheme,
        num_layers: a.layers,
        codebook_size: a.codebook_size,
        latent_dim,
        quant_dim: if scheme == TrainScheme::Projected {
            a.quant_dim.unwrap_or(8)
        } else {
            latent_dim
        },
        decay: a.decay,
        learning_rate: a.learning_rate,
        steps: a.steps,
        batch_size: a.batch_size,
        seed: a.seed,
        restart_period: a.restart_period,
        init: match a.init {
            InitArg::Random => CodebookInit::Random,
            InitArg::Kmeans => CodebookInit::KMeans,
        },
        ..TrainConfig::default()
    };
    let (quantizer, report) = train_quantizer(corpus.view(), &config)?;
    formats::write_codebook(&a.out, &quantizer)?;

    let mut r = Report::default();
    r.kv("scheme", format!("{:?}", scheme).to_lowercase())
        .kv("layers", config.num_layers)
        .kv("codebook_size", config.codebook_size)
        .kv("latent_dim", config.latent_dim)
        .kv("quant_dim", quantizer.quant_dim())
        .kv("corpus_vectors", corpus.nrows())
        .kv("steps", config.steps)
        .kv("seed", config.seed)
        .kv("final_batch_mse", report.final_mse())
        .kv("final_mse", report.corpus_mse)
        .kv("bits_per_code", bits_per_code(config.codebook_size));
    for (n, u) in report.utilization.iter().enumerate() {
        let l = n + 1;
        r.kv(format_args!("layer_{l}_used_codes"), u.used_codes)
            .kv(format_args!("layer_{l}_utilization"), u.utilization_fraction)
            .kv(format_args!("layer_{l}_perplexity"), u.perplexity);
        if scheme == TrainScheme::EmaRestart {
            r.kv(format_args!("layer_{l}_restarted"), report.restarted[n]);
        }
    }
    eprintln!("training_secs: {:.3}", report.wall_clock.as_secs_f64());
    Ok(r.0)
}

pub fn encode(a: EncodeArgs) -> CliResult {
    let quantizer = formats::read_codebook(&a.codebook)?;
    let data = formats::read_vectors(&a.input)?;
    if data.ncols() != quantizer.latent_dim() && data.nrows() > 0 {
        return Err(Error::Incompatible(format!(
            "codebook latent dim {} vs vector file dim {}",
            quantizer.latent_dim(),
            data.ncols()
        ))
        .into());
    }
    if !(a.token_rate > 0.0 && a.token_rate.is_finite()) {
        return Err(usage("--token-rate must be positive"));
    }
    let frames = if data.nrows() == 0 {
        Vec::new()
    } else {
        quantizer.encode_batch(data.view())?
    };
    let mse = if frames.is_empty() {
        0.0
    } else {
        let recon = quantizer.decode_batch(&frames)?;
        (&recon - &data).mapv(|v| v * v).mean().unwrap_or(0.0)
    };
    let stream = TokenStream::new(
        a.id,
        a.token_rate,
        quantizer.num_layers(),
        quantizer.codebook_size(),
        frames,
    )?;
    formats::write_streams(&a.out, std::slice::from_ref(&stream))?;
    let mut r = Report::default();
    r.kv("frames", stream.len())
        .kv("layers", stream.layers)
        .kv("codebook_size", stream.codebook_size)
        .kv("token_rate_hz", stream.token_rate_hz)
        .kv("bits_per_code", bits_per_code(stream.codebook_size))
        .kv("bitrate_bps", quantizer.bitrate_bps(stream.token_rate_hz))
        .kv("mse", mse);
    Ok(r.0)
}

pub fn decode(a: DecodeArgs) -> CliResult {
    let quantizer = formats::read_codebook(&a.codebook)?;
    let streams = formats::read_streams(&a.tokens)?;
    let mut frames: Vec<TokenFrame> = Vec::new();
    for s in &streams {
        if s.layers != quantizer.num_layers() || s.codebook_size != quantizer.codebook_size() {
            return Err(Error::Incompatible(format!(
                "stream {:?} has {} layers x {} codes, codebook has {} x {}",
                s.id,
                s.layers,
                s.codebook_size,
                quantizer.num_layers(),
                quantizer.codebook_size()
            ))
            .into());
        }
        frames.extend(s.frames.iter().cloned());
    }
    let data = if frames.is_empty() {
        Array2::zeros((0, quantizer.latent_dim()))
    } else {
        quantizer.decode_batch(&frames)?
    };
    formats::write_vectors(&a.out, data.view())?;
    let mut r = Report::default();
    r.kv("streams", streams.len())
        .kv("frames", data.nrows())
        .kv("latent_dim", data.ncols());
    Ok(r.0)
}

pub fn analyze(a: AnalyzeArgs) -> CliResult {
    if a.layer == 0 {
        return Err(usage("--layer is 1-based"));
    }
    let mut streams = Vec::new();
    for p in &a.tokens {
        streams.extend(formats::read_streams(p)?);
    }
    if let Some(s) = streams.first() {
        if a.layer > s.layers {
            return Err(usage(format!("--layer {} but streams have {} layers", a.layer, s.layers)));
        }
    }
    let u = utilization(&streams, a.layer - 1)?;
    let table = rank_frequency(&u);
    let mut r = Report::default();
    match a.format {
        ReportFormat::Text => {
            r.kv("layer", a.layer)
                .kv("streams", streams.len())
                .kv("total_frames", u.total_frames)
                .kv("codebook_size", u.codebook_size())
                .kv("used_codes", u.used_codes)
                .kv("utilization", u.utilization_fraction)
                .kv("entropy_bits", u.entropy_bits)
                .kv("perplexity", u.perplexity);
            for (rank, count) in table {
                r.kv("rank_frequency", format_args!("{rank} {count}"));
            }
        }
        ReportFormat::JsonLines => {
            let summary = serde_json::json!({
                "layer": a.layer,
                "streams": streams.len(),
                "total_frames": u.total_frames,
                "codebook_size": u.codebook_size(),
                "used_codes": u.used_codes,
                "utilization": u.utilization_fraction,
                "entropy_bits": u.entropy_bits,
                "perplexity": u.perplexity,
            });
            writeln!(r.0, "{summary}").expect("writing to a String");
            for (rank, count) in table {
                writeln!(r.0, "{}", serde_json::json!({ "rank": rank, "count": count }))
                    .expect("writing to a String");
            }
        }
    }
    Ok(r.0)
}

fn parse_cfg(s: &str) -> Result<(f64, f64), CliError> {
    let bad = || usage(format!("--cfg expects start:end, got {s:?}"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn random_grid(id: &str, frames: usize, layers: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<TokenStream, Error> {
    let frames = (0..frames)
        .map(|_| TokenFrame::new((0..layers).map(|_| rng.random_range(0..k)).collect()))
        .collect();
    TokenStream::new(id, 50.0, layers, k, frames)
}

fn prefix(stream: &TokenStream, frames: usize) -> Result<TokenStream, Error> {
    TokenStream::new(
        stream.id.clone(),
        stream.token_rate_hz,
        stream.layers,
        stream.codebook_size,
        stream.frames[..frames.min(stream.len())].to_vec(),
    )
}

pub fn mlm_sim(a: MlmSimArgs) -> CliResult {
    if a.prompt_frames >= a.frames {
        return Err(usage(format!(
            "--prompt-frames {} must be smaller than --frames {}",
            a.prompt_frames, a.frames
        )));
    }
    if a.layers == 0 || a.codebook_size == 0 {
        return Err(usage("--layers and --codebook-size must be positive"));
    }
    let (cfg_start, cfg_end) = parse_cfg(&a.cfg)?;
    let schedule = DecodeSchedule {
        iterations_layer1: a.iterations,
        mask_block_size: a.block_size,
        cfg_start,
        cfg_end,
        temperature: a.temperature,
        rng_seed: a.seed,
        unconditional_branch: !a.no_cfg,
        ..DecodeSchedule::default()
    };
    schedule.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let truth = random_grid("sim", a.frames, a.layers, a.codebook_size, &mut rng)?;
    let condition: Vec<usize> = (0..a.frames).map(|_| rng.random_range(0..500)).collect();
    let prompt = prefix(&truth, a.prompt_frames)?;
    let model: Box<dyn ScoreModel> = match a.model {
        ScoreModelArg::Oracle => Box::new(OracleScoreModel::new(
            truth.clone(),
            a.margin,
            a.noise_seed.unwrap_or(a.seed),
        )),
        ScoreModelArg::Uniform => Box::new(UniformScoreModel {
            codebook_size: a.codebook_size,
        }),
    };
    let (out, stats) = generate_parallel(model.as_ref(), &condition, &prompt, a.frames, &schedule)?;
    if let Some(p) = &a.dump_truth {
        formats::write_streams(p, std::slice::from_ref(&truth))?;
    }
    if let Some(p) = &a.out {
        formats::write_streams(p, std::slice::from_ref(&out))?;
    }
    let mut r = Report::default();
    r.kv("frames", out.len())
        .kv("layers", out.layers)
        .kv("prompt_frames", a.prompt_frames)
        .kv("forward_passes", stats.forward_passes)
        .kv("unconditional_passes", stats.unconditional_passes)
        .kv("commits_per_iteration", join(&stats.commits_per_iteration))
        .kv("cfg_coefficients", join(&stats.cfg_coefficients))
        .kv("matches_truth", out.frames == truth.frames);
    Ok(r.0)
}

pub fn arnar_sim(a: ArnarSimArgs) -> CliResult {
    if a.utterances == 0 {
        return Err(usage("--utterances must be at least 1"));
    }
    let NarModelArg::Oracle = a.nar;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);

    // (AR model, prompts per utterance, hidden NAR grids)
    let (ar, prompts, hidden): (Box<dyn ArModel>, Vec<TokenStream>, Vec<Vec<TokenFrame>>) = match a.ar {
        ArModelArg::Ngram => {
            let path = a
                .train_tokens
                .as_ref()
                .ok_or_else(|| usage("--ar ngram requires --train-tokens"))?;
            let streams = formats::read_streams(path)?;
            let model = train_ngram_ar(&streams, a.order, a.add_k)?;
            let prompts = (0..a.utterances)
                .map(|i| prefix(&streams[i % streams.len()], a.prompt_frames))
                .collect::<Result<_, _>>()?;
            (Box::new(model), prompts, vec![Vec::new(); a.utterances])
        }
        ArModelArg::Oracle | ArModelArg::Cycling => {
            if a.layers == 0 || a.codebook_size == 0 {
                return Err(usage("--layers and --codebook-size must be positive"));
            }
            let truth = random_grid(
                "sim",
                a.prompt_frames + a.frames,
                a.layers,
                a.codebook_size,
                &mut rng,
            )?;
            let prompt = prefix(&truth, a.prompt_frames)?;
            let rest = truth.frames[a.prompt_frames..].to_vec();
            let model: Box<dyn ArModel> = if a.ar == ArModelArg::Oracle {
                Box::new(OracleAr {
                    codebook_size: a.codebook_size,
                    truth: rest.iter().map(|f| f.codes[0]).collect(),
                    margin: a.margin,
                })
            } else {
                Box::new(CyclingAr {
                    codebook_size: a.codebook_size,
                    margin: a.margin,
                })
            };
            let hidden = if a.ar == ArModelArg::Oracle { rest } else { Vec::new() };
            (model, vec![prompt; a.utterances], vec![hidden; a.utterances])
        }
    };
    let support = match &a.support {
        Some(p) => {
            let mut codes: Vec<usize> = formats::read_streams(p)?
                .iter()
                .flat_map(|s| s.layer_codes(0))
                .collect();
            codes.sort_unstable();
            codes.dedup();
            Some(codes)
        }
        None => None,
    };

    let mut outputs = Vec::new();
    let (mut ar_steps, mut nar_passes, mut eos, mut empty) = (0usize, 0usize, 0usize, 0usize);
    for (i, (prompt, grid)) in prompts.iter().zip(&hidden).enumerate() {
        let nar: Box<dyn NarModel> = Box::new(OracleNar {
            codebook_size: prompt.codebook_size,
            truth: grid.clone(),
            margin: a.margin,
        });
        let config = GenConfig {
            temperature: a.temperature,
            max_frames: a.max_frames,
            rng_seed: a.seed.wrapping_add(i as u64),
            top_k: a.top_k,
        };
        match generate_text_to_tokens(ar.as_ref(), nar.as_ref(), &[], prompt, &config) {
            Ok((mut s, st)) => {
                s.id = format!("gen{i:05}");
                ar_steps += st.ar_steps;
                nar_passes = st.nar_passes;
                eos += st.hit_eos as usize;
                outputs.push(s);
            }
            Err(Error::EmptyGeneration(_)) => {
                empty += 1;
                ar_steps += 1;
            }
            Err(e) => return Err(e.into()),
        }
    }
    if let Some(p) = &a.out {
        formats::write_streams(p, &outputs)?;
    }
    let layer1: Vec<usize> = outputs.iter().flat_map(|s| s.layer_codes(0)).collect();
    let mut r = Report::default();
    r.kv("utterances", a.utterances)
        .kv("temperature", a.temperature)
        .kv("generated_frames", layer1.len())
        .kv("ar_steps", ar_steps)
        .kv("nar_passes", nar_passes)
        .kv("eos_stops", eos)
        .kv("empty_generations", empty);
    if a.utterances == 1 {
        if let Some(s) = outputs.first() {
            r.kv("layer1_codes", join(&s.layer_codes(0)));
        }
    }
    if a.ar == ArModelArg::Oracle {
        let matches = outputs.iter().zip(&hidden).all(|(s, h)| &s.frames == h);
        r.kv("matches_truth", matches);
    }
    if let Some(sup) = &support {
        r.kv("out_of_support_rate", out_of_support_rate(&layer1, sup));
    }
    Ok(r.0)
}

pub fn synth_tokens(a: SynthTokensArgs) -> CliResult {
    let (streams, support) = support_streams(
        a.utterances,
        a.frames,
        a.layers,
        a.codebook_size,
        a.support_size,
        a.seed,
    )?;
    formats::write_streams(&a.out, &streams)?;
    let mut r = Report::default();
    r.kv("utterances", streams.len())
        .kv("frames_per_utterance", a.frames)
        .kv("support_codes", support.len());
    Ok(r.0)
}

pub fn bitrate(a: BitrateArgs) -> CliResult {
    if a.layers == 0 || a.codebook_size == 0 || !(a.token_rate > 0.0) {
        return Err(usage("--layers, --codebook-size and --token-rate must be positive"));
    }
    let mut r = Report::default();
    r.kv("bits_per_code", bits_per_code(a.codebook_size))
        .kv("bitrate_bps", bitrate_bps(a.layers, a.codebook_size, a.token_rate))
        .kv("power_of_two", a.codebook_size.is_power_of_two());
    Ok(r.0)
}

