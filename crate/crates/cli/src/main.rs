//! Operator surface: synth, train, sample, eval, bench and an interactive
//! chat REPL.

mod chat;
mod config;
mod manifest;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use latentchat::corpus::{
    self, context_key, generate_synthetic, SyntheticOracle, Turn,
};
use latentchat::generate::{bench_phases, evaluate, sample_candidates, EvalMode, GenOptions};
use latentchat::pipeline::Pipeline;
use latentchat::tokenizer::Vocab;
use latentchat::training::{fit, TrainLogRecord};

use config::RunConfig;
use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "latentchat", version, about = "Latent-diffusion dialogue generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic one-to-many corpus plus its oracle sidecar
    Synth(SynthArgs),
    /// Train from a config file; writes checkpoints, loss log and manifest
    Train(TrainArgs),
    /// Sample n candidate responses for one context from a checkpoint
    Sample(SampleArgs),
    /// Score a checkpoint on a corpus (standard / upper-bound / synthetic)
    Eval(EvalArgs),
    /// Time the encode / denoise-loop / decode phases per step count
    Bench(BenchArgs),
    /// Interactive terminal chat with a checkpoint
    Chat(ChatArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    n_contexts: usize,
    #[arg(long, default_value_t = 8)]
    k_valid: usize,
    /// corpus JSONL path
    #[arg(long)]
    out: PathBuf,
    /// oracle sidecar path (defaults to <out>.oracle.jsonl)
    #[arg(long)]
    oracle_out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// overrides the config's out_dir
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// resume from a checkpoint_last.bin
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// vocab file (defaults to vocab.txt next to the checkpoint)
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    ck: CheckpointArgs,
    /// context as a JSON file: [{"role":0,"text":"..."}, ...]
    #[arg(long, conflicts_with = "turn")]
    context: Option<PathBuf>,
    /// inline context turns in order (roles alternate starting at 0)
    #[arg(long)]
    turn: Vec<String>,
    #[arg(long, default_value_t = 10)]
    n_samples: usize,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 0.0)]
    eta: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    /// conditioning weight for the latent sampler (1 = plain conditional)
    #[arg(long, default_value_t = 1.0)]
    cond_scale: f64,
    /// JSONL output path (stdout if omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Standard,
    UpperBound,
    Synthetic,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    ck: CheckpointArgs,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "standard")]
    mode: ModeArg,
    /// oracle sidecar (required in synthetic mode)
    #[arg(long)]
    oracle: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    n_samples: usize,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 0.0)]
    eta: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    /// conditioning weight for the latent sampler (1 = plain conditional)
    #[arg(long, default_value_t = 1.0)]
    cond_scale: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    ck: CheckpointArgs,
    /// corpus to draw bench contexts from (synthetic contexts if omitted)
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// comma-separated step counts
    #[arg(long, default_value = "10,100,1000", value_delimiter = ',')]
    steps: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    contexts: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    /// conditioning weight for the latent sampler (1 = plain conditional)
    #[arg(long, default_value_t = 1.0)]
    cond_scale: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ChatArgs {
    #[command(flatten)]
    ck: CheckpointArgs,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 0.0)]
    eta: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    /// conditioning weight for the latent sampler (1 = plain conditional)
    #[arg(long, default_value_t = 1.0)]
    cond_scale: f64,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Sample(args) => cmd_sample(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Chat(args) => cmd_chat(args),
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let (samples, oracle) = generate_synthetic(args.seed, args.n_contexts, args.k_valid)?;
    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    corpus::save_jsonl(&args.out, &samples)?;
    let oracle_path = args
        .oracle_out
        .unwrap_or_else(|| args.out.with_extension("oracle.jsonl"));
    oracle.save(&oracle_path)?;

    let mut manifest = RunManifest::new(
        "synth",
        args.seed,
        serde_json::json!({
            "n_contexts": args.n_contexts,
            "k_valid": args.k_valid,
        }),
    );
    manifest.add_file(&args.out)?;
    manifest.add_file(&oracle_path)?;
    let manifest_path = args.out.with_extension("manifest.json");
    manifest.write(&manifest_path)?;
    println!(
        "wrote {} samples to {}, oracle to {}, manifest to {}",
        samples.len(),
        args.out.display(),
        oracle_path.display(),
        manifest_path.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut run_cfg = RunConfig::load(&args.config)?;
    if let Some(dir) = args.out_dir {
        run_cfg.out_dir = dir;
    }
    let out_dir = run_cfg.out_dir.clone();
    fs::create_dir_all(&out_dir)?;

    let samples = corpus::load_jsonl(&run_cfg.corpus)
        .with_context(|| format!("loading corpus {}", run_cfg.corpus.display()))?;
    if samples.is_empty() {
        bail!("corpus {} holds no samples", run_cfg.corpus.display());
    }
    println!("corpus: {} samples", samples.len());

    let vocab_path = out_dir.join("vocab.txt");
    let vocab = if vocab_path.exists() {
        println!("reusing vocab {}", vocab_path.display());
        Vocab::load(&vocab_path)?
    } else {
        let lines: Vec<String> = samples
            .iter()
            .flat_map(|s| {
                s.context
                    .iter()
                    .map(|t| t.text.clone())
                    .chain(std::iter::once(s.response.clone()))
            })
            .collect();
        let vocab = Vocab::train_bpe(&lines, run_cfg.vocab_size)?;
        vocab.save(&vocab_path)?;
        println!(
            "trained vocab: {} tokens -> {}",
            vocab.size(),
            vocab_path.display()
        );
        vocab
    };

    let train_cfg = run_cfg.train_config();
    let (pipeline, mut opt, start_step) = match &args.resume {
        Some(path) => {
            let (pipeline, meta, opt) =
                Pipeline::<f32>::load_checkpoint_resumable(path, train_cfg.adamw())?;
            if meta.vocab_hash != vocab.content_hash() {
                bail!(
                    "checkpoint {} was trained with a different vocab",
                    path.display()
                );
            }
            println!("resuming from {} at step {}", path.display(), meta.step);
            (pipeline, opt, meta.step)
        }
        None => {
            let pipeline = Pipeline::<f32>::new(
                run_cfg.pipeline_config(vocab.size() as usize),
                run_cfg.seed,
            )?;
            let opt = pipeline.optimizer(train_cfg.adamw());
            (pipeline, opt, 0)
        }
    };

    let started = std::time::Instant::now();
    let mut print_progress = |r: &TrainLogRecord| {
        if r.step % 100 == 0 || r.step == 1 {
            println!(
                "step {:>6}  nll {:.4}  bow {:.4}  ld {:.4}  total {:.4}  lr {:.2e}",
                r.step, r.nll, r.bow, r.ld, r.total, r.lr
            );
        }
    };
    let report = fit(
        &pipeline,
        &mut opt,
        &samples,
        &vocab,
        &train_cfg,
        &out_dir,
        start_step,
        Some(&mut print_progress),
    )?;
    for w in &report.skipped {
        eprintln!("warning: sample {}: {}", w.sample_index, w.reason);
    }
    println!(
        "done in {:.1}s; best dev loss {:.4} at step {} -> {}",
        started.elapsed().as_secs_f64(),
        report.best_dev_loss,
        report.best_step,
        report.best_path.display()
    );

    let mut manifest = RunManifest::new("train", run_cfg.seed, serde_json::to_value(&run_cfg)?);
    manifest.add_file(&vocab_path)?;
    manifest.add_file(&report.best_path)?;
    manifest.add_file(&report.last_path)?;
    manifest.add_file(&out_dir.join("loss_log.jsonl"))?;
    manifest.write(&out_dir.join("manifest.json"))?;
    println!("manifest -> {}", out_dir.join("manifest.json").display());
    Ok(())
}

fn load_pipeline(ck: &CheckpointArgs) -> Result<(Pipeline<f32>, Vocab)> {
    let (pipeline, meta) = Pipeline::<f32>::load_checkpoint(&ck.checkpoint)
        .with_context(|| format!("loading checkpoint {}", ck.checkpoint.display()))?;
    let vocab_path = ck.vocab.clone().unwrap_or_else(|| {
        ck.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("vocab.txt")
    });
    let vocab = Vocab::load(&vocab_path)
        .with_context(|| format!("loading vocab {}", vocab_path.display()))?;
    if vocab.content_hash() != meta.vocab_hash {
        bail!(
            "vocab {} does not match the checkpoint (trained with a different tokenizer)",
            vocab_path.display()
        );
    }
    Ok((pipeline, vocab))
}

fn parse_context(args: &SampleArgs) -> Result<Vec<Turn>> {
    if let Some(path) = &args.context {
        let text = fs::read_to_string(path)?;
        let turns: Vec<Turn> = serde_json::from_str(&text)
            .with_context(|| format!("parsing context file {}", path.display()))?;
        if turns.is_empty() {
            bail!("context file {} holds no turns", path.display());
        }
        return Ok(turns);
    }
    if args.turn.is_empty() {
        bail!("provide --context <file> or at least one --turn");
    }
    Ok(args
        .turn
        .iter()
        .enumerate()
        .map(|(i, text)| Turn {
            role: (i % 2) as u8,
            text: text.clone(),
        })
        .collect())
}

fn cmd_sample(args: SampleArgs) -> Result<()> {
    let (pipeline, vocab) = load_pipeline(&args.ck)?;
    let context = parse_context(&args)?;

    let ctx_tokens: usize = context
        .iter()
        .map(|t| vocab.encode(&t.text).len() + 1)
        .sum();
    if ctx_tokens > pipeline.cfg.max_ctx {
        eprintln!(
            "notice: context is {ctx_tokens} tokens, truncating oldest turns to fit {}",
            pipeline.cfg.max_ctx
        );
    }

    let opts = GenOptions {
        n_samples: args.n_samples,
        steps: args.steps,
        eta: args.eta,
        seed: args.seed,
        beam: args.beam,
        cond_scale: args.cond_scale,
    };
    let candidates = sample_candidates(&pipeline, &vocab, &context, &opts)?;

    let key = context_key(&context);
    let mut lines = Vec::with_capacity(candidates.len());
    for (i, text) in candidates.iter().enumerate() {
        lines.push(serde_json::to_string(&serde_json::json!({
            "context_hash": key,
            "seed": args.seed.wrapping_add(i as u64),
            "steps": args.steps,
            "eta": args.eta,
            "text": text,
        }))?);
    }
    match &args.out {
        Some(path) => {
            fs::write(path, lines.join("\n") + "\n")?;
            let mut manifest = RunManifest::new(
                "sample",
                args.seed,
                serde_json::json!({
                    "checkpoint": args.ck.checkpoint,
                    "n_samples": args.n_samples,
                    "steps": args.steps,
                    "eta": args.eta,
                    "beam": args.beam,
                    "context_hash": key,
                }),
            );
            manifest.add_file(path)?;
            manifest.write(&path.with_extension("manifest.json"))?;
            println!("wrote {} candidates to {}", candidates.len(), path.display());
        }
        None => {
            for line in &lines {
                println!("{line}");
            }
        }
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (pipeline, vocab) = load_pipeline(&args.ck)?;
    let samples = corpus::load_jsonl(&args.corpus)?;
    let mode = match args.mode {
        ModeArg::Standard => EvalMode::Standard,
        ModeArg::UpperBound => EvalMode::UpperBound,
        ModeArg::Synthetic => EvalMode::Synthetic,
    };
    let oracle = match (&args.oracle, mode) {
        (Some(path), _) => Some(SyntheticOracle::load(path)?),
        (None, EvalMode::Synthetic) => bail!("--oracle is required in synthetic mode"),
        _ => None,
    };
    let opts = GenOptions {
        n_samples: args.n_samples,
        steps: args.steps,
        eta: args.eta,
        seed: args.seed,
        beam: args.beam,
        cond_scale: args.cond_scale,
    };
    let report = evaluate(&pipeline, &vocab, &samples, mode, &opts, oracle.as_ref())?;

    println!("mode        {:>12}", report.mode);
    println!("contexts    {:>12}", report.n_contexts);
    println!("samples/ctx {:>12}", report.n_samples);
    println!("steps       {:>12}", report.steps);
    println!("bleu-1      {:>12.4}", report.bleu1);
    println!("bleu-2      {:>12.4}", report.bleu2);
    println!("distinct-1  {:>12.4}", report.distinct1);
    println!("distinct-2  {:>12.4}", report.distinct2);
    if let Some(v) = report.validity_rate {
        println!("validity    {:>12.4}", v);
    }
    if let Some(d) = report.mean_distinct_valid {
        println!("distinct-ok {:>12.4}", d);
    }

    if let Some(path) = &args.out {
        fs::write(path, serde_json::to_string_pretty(&report)?)?;
        let mut manifest = RunManifest::new(
            "eval",
            args.seed,
            serde_json::json!({
                "checkpoint": args.ck.checkpoint,
                "corpus": args.corpus,
                "mode": report.mode,
                "n_samples": args.n_samples,
                "steps": args.steps,
                "eta": args.eta,
                "beam": args.beam,
            }),
        );
        manifest.add_file(path)?;
        manifest.write(&path.with_extension("manifest.json"))?;
        println!("report -> {}", path.display());
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let (pipeline, vocab) = load_pipeline(&args.ck)?;
    let contexts: Vec<Vec<Turn>> = match &args.corpus {
        Some(path) => corpus::load_jsonl(path)?
            .into_iter()
            .take(args.contexts)
            .map(|s| s.context)
            .collect(),
        None => {
            let (samples, _) = generate_synthetic(args.seed, args.contexts, 4)?;
            samples.into_iter().map(|s| s.context).collect()
        }
    };
    if contexts.len() < args.contexts {
        eprintln!(
            "notice: only {} contexts available (requested {})",
            contexts.len(),
            args.contexts
        );
    }
    let opts = GenOptions {
        seed: args.seed,
        beam: args.beam,
        cond_scale: args.cond_scale,
        ..GenOptions::default()
    };
    let rows = bench_phases(&pipeline, &vocab, &contexts, &args.steps, &opts)?;

    println!(
        "{:>8} {:>12} {:>14} {:>12} {:>12}",
        "steps", "encode s", "denoise s", "decode s", "total s"
    );
    for r in &rows {
        println!(
            "{:>8} {:>12.5} {:>14.5} {:>12.5} {:>12.5}",
            r.steps, r.encode_s, r.denoise_s, r.decode_s, r.total_s
        );
    }
    if let Some(path) = &args.out {
        fs::write(path, serde_json::to_string_pretty(&rows)?)?;
        let mut manifest = RunManifest::new(
            "bench",
            args.seed,
            serde_json::json!({
                "checkpoint": args.ck.checkpoint,
                "steps": args.steps,
                "contexts": contexts.len(),
                "beam": args.beam,
            }),
        );
        manifest.add_file(path)?;
        manifest.write(&path.with_extension("manifest.json"))?;
        println!("table -> {}", path.display());
    }
    Ok(())
}

fn cmd_chat(args: ChatArgs) -> Result<()> {
    let (pipeline, vocab) = load_pipeline(&args.ck)?;
    let opts = GenOptions {
        n_samples: 1,
        steps: args.steps,
        eta: args.eta,
        seed: args.seed,
        beam: args.beam,
        cond_scale: args.cond_scale,
    };
    let mut session = chat::ChatSession::new(&pipeline, &vocab, opts);
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    chat::run_repl(&mut session, stdin.lock(), stdout.lock())?;
    println!("bye");
    Ok(())
}
