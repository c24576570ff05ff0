use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use psyn::corpus::{self, Corpus, Manifest};
use psyn::features::{text_to_phonemes, words_and_spans, Lexicon};
use psyn::model::checkpoint;
use psyn::model::synth::{evaluate, synthesize, SynthRequest};
use psyn::model::train::{extract_prosody_targets, stage1_train, stage2_train, TrainOptions};
use psyn::model::{ModelConfig, TtsModel};
use psyn::prosody::{SampleMode, StubWordEmbeddings};
use psyn::verify::{self, Suite};
use psyn::{Error, Result};

#[derive(Parser)]
#[command(name = "psyn", about = "Feed-forward prosody-aware speech synthesis", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a corpus: synthetic toy data or a directory of wav files.
    Prepare(PrepareArgs),
    /// Run training stage 1 or 2.
    Train(TrainArgs),
    /// Write prosody-target sidecars from a stage-1 checkpoint.
    ExtractProsody(ExtractArgs),
    /// Generate a mel-spectrogram from text.
    Synth(SynthArgs),
    /// Run the self-check suites.
    Verify(VerifyArgs),
    /// Report test-set metrics for a checkpoint.
    Eval(EvalArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Generate the synthetic toy corpus instead of reading audio.
    #[arg(long, conflicts_with = "wav_dir")]
    synthetic: bool,
    /// Directory of 22.05 kHz mono 16-bit wav files named after their text.
    #[arg(long)]
    wav_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Utterance count in synthetic mode.
    #[arg(long, default_value_t = 50)]
    count: usize,
    /// Training fraction.
    #[arg(long, default_value_t = 0.98)]
    split: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    #[arg(long)]
    manifest: PathBuf,
    /// desk | full
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Flat key=value config file; # starts a comment.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline override, repeatable: --set key=value (takes precedence
    /// over the config file).
    #[arg(long = "set")]
    sets: Vec<String>,
    /// Stage-2 input checkpoint (stage-1 output).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    text: String,
    #[arg(long)]
    out: PathBuf,
    /// sample | argmax
    #[arg(long, default_value = "sample")]
    mode: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f32,
    /// Duration multiplier.
    #[arg(long, default_value_t = 1.0)]
    speed: f32,
}

#[derive(Args)]
struct VerifyArgs {
    /// gradients | attention | alignment | mdn | all
    #[arg(long, default_value = "all")]
    suite: String,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
}

fn parse_kv_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{}:{}: expected key=value", path.display(), lineno + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_set(s: &str) -> Result<(String, String)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| Error::Config(format!("--set {s:?}: expected key=value")))
}

/// Route one key either to the model config or to the train options.
fn apply_key(cfg: &mut ModelConfig, opts: &mut TrainOptions, key: &str, value: &str) -> Result<()> {
    let bad = |e: String| Error::Config(format!("{key}: {e}"));
    match key {
        "steps" => opts.steps = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
        "batch" => opts.batch_size = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
        "workers" => opts.workers = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
        "warmup_frac" => opts.warmup_frac = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
        "lambda_dur" => opts.lambda_dur = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
        "lambda_align" => opts.lambda_align = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
        "lr_factor" => opts.lr_factor = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
        "lr_warmup" => opts.lr_warmup = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
        _ => cfg.set(key, value)?,
    }
    Ok(())
}

fn cmd_prepare(args: &PrepareArgs) -> Result<()> {
    let (train, test) = if args.synthetic {
        corpus::generate_synthetic(&args.out, args.count, args.split, args.seed)?
    } else {
        let dir = args
            .wav_dir
            .as_ref()
            .ok_or_else(|| Error::Input("prepare needs --synthetic or --wav-dir".into()))?;
        corpus::prepare_wav_dir(dir, &args.out, args.split, args.seed)?
    };
    let train_m = Manifest::load(&train)?;
    let test_m = Manifest::load(&test)?;
    println!("train_manifest={}", train.display());
    println!("test_manifest={}", test.display());
    println!("train_utterances={}", train_m.utterances.len());
    println!("test_utterances={}", test_m.utterances.len());
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let corpus = Corpus::load(&args.manifest)?;
    let mut opts = if args.stage == 1 {
        TrainOptions::stage1(args.steps, args.seed)
    } else {
        TrainOptions::stage2(args.steps, args.seed)
    };
    opts.batch_size = args.batch;
    opts.workers = args.workers;

    let mut cfg = match args.preset.as_str() {
        "desk" => ModelConfig::desk(corpus.inventory_size),
        "full" => ModelConfig::full(corpus.inventory_size),
        other => return Err(Error::Config(format!("unknown preset {other:?}; expected desk|full"))),
    };
    let mut overrides = Vec::new();
    if let Some(path) = &args.config {
        overrides.extend(parse_kv_file(path)?);
    }
    for s in &args.sets {
        overrides.push(parse_set(s)?);
    }
    for (k, v) in &overrides {
        apply_key(&mut cfg, &mut opts, k, v)?;
    }

    if args.stage == 1 {
        let mut model = TtsModel::new(cfg, args.seed)?;
        let (curve, adam) = stage1_train(&mut model, &corpus, &opts)?;
        for (i, l) in curve.iter().enumerate() {
            println!(
                "step={} loss={} mel_l1={} dur_l2={} align={}",
                i + 1,
                l.total,
                l.mel,
                l.dur,
                l.align
            );
        }
        checkpoint::save(&args.out, &model, Some(&adam))?;
        println!("checkpoint={}", args.out.display());
    } else {
        let ckpt = args
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::StageOrder("stage 2 needs --checkpoint from stage 1".into()))?;
        let (mut model, _) = checkpoint::load(ckpt)?;
        if corpus.utterances.iter().any(|u| u.prosody.is_none()) {
            return Err(Error::Input(
                "stage 2 needs prosody targets; run extract-prosody on this manifest first".into(),
            ));
        }
        let provider = StubWordEmbeddings::new(model.config.word_dim);
        let (curve, adam) = stage2_train(&mut model, &corpus, &provider, &opts)?;
        for (i, nll) in curve.iter().enumerate() {
            println!("step={} prosody_nll={}", i + 1, nll);
        }
        checkpoint::save(&args.out, &model, Some(&adam))?;
        println!("checkpoint={}", args.out.display());
    }
    Ok(())
}

fn cmd_extract_prosody(args: &ExtractArgs) -> Result<()> {
    let (model, _) = checkpoint::load(&args.checkpoint)?;
    let corpus = Corpus::load(&args.manifest)?;
    let targets = extract_prosody_targets(&model, &corpus)?;
    let mut manifest = Manifest::load(&args.manifest)?;
    let base = args.manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    for (u, rep) in manifest.utterances.iter_mut().zip(&targets) {
        let rel = PathBuf::from(format!("{}.pros", u.id));
        corpus::write_prosody(&base.join(&rel), rep, u.phonemes.len(), model.config.prosody_dim)?;
        u.prosody = Some(rel);
    }
    manifest.save(&args.manifest)?;
    println!("extracted={}", targets.len());
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let (model, _) = checkpoint::load(&args.checkpoint)?;
    let lexicon = Lexicon::english();
    let seq = text_to_phonemes(&args.text, &lexicon)?;
    let (words, spans) = words_and_spans(&args.text)?;
    let mode = match args.mode.as_str() {
        "sample" => SampleMode::Sample,
        "argmax" => SampleMode::Argmax,
        other => return Err(Error::Input(format!("unknown mode {other:?}; expected sample|argmax"))),
    };
    let provider = StubWordEmbeddings::new(model.config.word_dim);
    let mel = synthesize(
        &model,
        &provider,
        &SynthRequest {
            phonemes: &seq.ids,
            words: &words,
            spans: &spans,
            seed: args.seed,
            temperature: args.temperature,
            mode,
            speed: args.speed,
        },
    )?;
    corpus::write_melb(&args.out, &mel)?;
    println!("frames={}", mel.frames);
    println!("out={}", args.out.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (model, _) = checkpoint::load(&args.checkpoint)?;
    let corpus = Corpus::load(&args.manifest)?;
    let provider = StubWordEmbeddings::new(model.config.word_dim);
    let report = evaluate(&model, &corpus, &provider)?;
    println!("mel_l1={}", report.mel_l1);
    if let Some(mae) = report.duration_mae {
        println!("duration_mae={mae}");
    }
    if let Some(nll) = report.prosody_nll {
        println!("prosody_nll={nll}");
    }
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Prepare(a) => cmd_prepare(a),
        Command::Train(a) => cmd_train(a),
        Command::ExtractProsody(a) => cmd_extract_prosody(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Verify(a) => verify::run(a.suite.parse::<Suite>()?),
        Command::Eval(a) => cmd_eval(a),
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
