//! Joint training: posterior encoding, bag-of-words loss, forward noising,
//! denoising, latent-denoising loss, NLL on the denoised latent, one AdamW
//! step per batch under a linear-warmup schedule; checkpointing with exact
//! resume.
//!
//! Randomness is derived per step from `(seed, step)` via independent
//! ChaCha streams, so a resumed run consumes exactly the random draws the
//! unbroken run would have.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{BatchBuilder, BatchWarning, CorpusError, DialogueSample};
use crate::diffusion::{ld_loss, q_sample, DiffusionError};
use crate::model::ModelError;
use crate::pipeline::{CheckpointMeta, Pipeline, PipelineError};
use crate::tensor::{clip_grad_norm, no_grad, AdamW, AdamWConfig, Scalar, Tensor, TensorError};
use crate::tokenizer::Vocab;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}: nll={nll} bow={bow} ld={ld}")]
    NonFiniteLoss { step: usize, nll: f64, bow: f64, ld: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Optimization hyperparameters. Reference full-scale settings: peak lr
/// 1e-4 warmed up linearly from 1e-7, batch 128, 10k-20k steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub init_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub dev_fraction: f64,
    /// loss weights; the objective sums the three terms unweighted by default
    pub w_nll: f64,
    pub w_bow: f64,
    pub w_ld: f64,
    /// probability of hiding the context from the denoiser for a batch row,
    /// forcing the unconditional noise-to-latent pathway to carry the
    /// response distribution. Tiny corpora repeat each context often enough
    /// that the denoiser otherwise shortcuts through pure context lookup
    /// and sampling collapses to one mode per context. 0 disables.
    pub ctx_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 3000,
            batch_size: 32,
            peak_lr: 1e-4,
            init_lr: 1e-7,
            warmup_steps: 300,
            weight_decay: 0.01,
            clip_norm: 1.0,
            seed: 42,
            eval_every: 250,
            dev_fraction: 0.1,
            w_nll: 1.0,
            w_bow: 1.0,
            w_ld: 1.0,
            ctx_dropout: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.total_steps == 0 || self.batch_size == 0 {
            return Err(TrainError::Config(
                "total_steps and batch_size must be positive".into(),
            ));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(TrainError::Config(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.peak_lr <= 0.0 || self.init_lr <= 0.0 || self.peak_lr < self.init_lr {
            return Err(TrainError::Config(
                "learning rates must be positive with peak_lr >= init_lr".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dev_fraction) || self.dev_fraction == 0.0 {
            return Err(TrainError::Config(
                "dev_fraction must lie strictly between 0 and 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.ctx_dropout) {
            return Err(TrainError::Config(
                "ctx_dropout must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Linear warmup from `init_lr` to `peak_lr` over `warmup_steps`, constant
/// afterwards. Step counting starts at 1.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps == 0 || step >= cfg.warmup_steps {
        return cfg.peak_lr;
    }
    cfg.init_lr + (cfg.peak_lr - cfg.init_lr) * step as f64 / cfg.warmup_steps as f64
}

/// One training-step record; `total` always equals `nll + bow + ld` as
/// logged.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainLogRecord {
    pub step: usize,
    pub nll: f64,
    pub bow: f64,
    pub ld: f64,
    pub total: f64,
    pub lr: f64,
    pub ms: f64,
}

// rng stream namespaces; training steps use STREAM_STEP_BASE + step
const STREAM_DEV: u64 = 2;
const STREAM_SPLIT: u64 = 3;
const STREAM_STEP_BASE: u64 = 1 << 20;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Executes one joint step: encode context, encode posterior, BOW loss,
/// per-row uniform timestep draw, forward-noise, denoise, LD loss, NLL on
/// the denoised latent, one backward pass and one optimizer update. The
/// no-latent ablation runs the NLL term only.
pub fn train_step<F: Scalar>(
    pipeline: &Pipeline<F>,
    opt: &mut AdamW<F>,
    builder: &BatchBuilder,
    train_indices: &[usize],
    step: usize,
    cfg: &TrainConfig,
) -> Result<TrainLogRecord, TrainError> {
    let started = Instant::now();
    let mut rng = stream_rng(cfg.seed, STREAM_STEP_BASE + step as u64);
    let picks: Vec<usize> = (0..cfg.batch_size)
        .map(|_| train_indices[rng.gen_range(0..train_indices.len())])
        .collect();
    let batch = builder.batch(&picks, pipeline.cfg.model.max_turns as u32)?;

    let enc = pipeline.model.encode_context(&batch)?;
    let (total, nll_v, bow_v, ld_v) = if pipeline.use_latent() {
        let denoiser = pipeline.denoiser.as_ref().expect("latent path has denoiser");
        let z0 = pipeline.model.encode_posterior(&batch)?;
        let bow = pipeline.model.bow_loss(&z0, &batch)?;
        let t_max = pipeline.schedule.t_max;
        let ts: Vec<usize> = (0..batch.batch).map(|_| rng.gen_range(1..=t_max)).collect();
        let eps = Tensor::randn(z0.z.shape(), 1.0, &mut rng);
        let z_t = q_sample(&z0, &ts, &eps, &pipeline.schedule)?;
        // draw context-dropout decisions after ts/eps to keep stream order fixed
        let enc_for_denoiser = if cfg.ctx_dropout > 0.0 {
            let mut mask = enc.mask.clone();
            let row = batch.ctx_len;
            for b in 0..batch.batch {
                if rng.gen_bool(cfg.ctx_dropout) {
                    mask[b * row..(b + 1) * row].fill(false);
                }
            }
            crate::model::EncoderOutput {
                hidden: enc.hidden.clone(),
                mask,
            }
        } else {
            enc.clone()
        };
        let denoised = denoiser.denoise(&z_t, &ts, &enc_for_denoiser, &pipeline.schedule)?;
        let ld = ld_loss(&denoised, &z0)?;
        let nll = pipeline.model.nll_loss(&batch, &enc, Some(&denoised))?;
        let total = nll
            .mul_scalar(F::from_f64(cfg.w_nll))
            .add(&bow.mul_scalar(F::from_f64(cfg.w_bow)))?
            .add(&ld.mul_scalar(F::from_f64(cfg.w_ld)))?;
        (total, nll.item().to_f64(), bow.item().to_f64(), ld.item().to_f64())
    } else {
        let nll = pipeline.model.nll_loss(&batch, &enc, None)?;
        let total = nll.mul_scalar(F::from_f64(cfg.w_nll));
        (total, nll.item().to_f64(), 0.0, 0.0)
    };

    let total_v = total.item().to_f64();
    if !total_v.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            step,
            nll: nll_v,
            bow: bow_v,
            ld: ld_v,
        });
    }
    total.backward()?;
    clip_grad_norm(opt.params(), cfg.clip_norm);
    let lr = lr_at(step, cfg);
    opt.step(lr)?;
    opt.zero_grads();

    Ok(TrainLogRecord {
        step,
        nll: nll_v,
        bow: bow_v,
        ld: ld_v,
        total: nll_v * cfg.w_nll + bow_v * cfg.w_bow + ld_v * cfg.w_ld,
        lr,
        ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// Total loss over the dev split under a fixed noise stream, so successive
/// evaluations are comparable.
pub fn dev_loss<F: Scalar>(
    pipeline: &Pipeline<F>,
    builder: &BatchBuilder,
    dev_indices: &[usize],
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    if dev_indices.is_empty() {
        return Err(TrainError::Config("dev set is empty".into()));
    }
    no_grad(|| {
        let mut rng = stream_rng(cfg.seed, STREAM_DEV);
        let mut total = 0.0;
        let mut batches = 0.0;
        for chunk in dev_indices.chunks(cfg.batch_size) {
            let batch = builder.batch(chunk, pipeline.cfg.model.max_turns as u32)?;
            let enc = pipeline.model.encode_context(&batch)?;
            let loss = if pipeline.use_latent() {
                let denoiser = pipeline.denoiser.as_ref().expect("latent path");
                let z0 = pipeline.model.encode_posterior(&batch)?;
                let bow = pipeline.model.bow_loss(&z0, &batch)?.item().to_f64();
                let t_max = pipeline.schedule.t_max;
                let ts: Vec<usize> =
                    (0..batch.batch).map(|_| rng.gen_range(1..=t_max)).collect();
                let eps = Tensor::randn(z0.z.shape(), 1.0, &mut rng);
                let z_t = q_sample(&z0, &ts, &eps, &pipeline.schedule)?;
                let denoised = denoiser.denoise(&z_t, &ts, &enc, &pipeline.schedule)?;
                let ld = ld_loss(&denoised, &z0)?.item().to_f64();
                let nll = pipeline
                    .model
                    .nll_loss(&batch, &enc, Some(&denoised))?
                    .item()
                    .to_f64();
                cfg.w_nll * nll + cfg.w_bow * bow + cfg.w_ld * ld
            } else {
                cfg.w_nll * pipeline.model.nll_loss(&batch, &enc, None)?.item().to_f64()
            };
            total += loss;
            batches += 1.0;
        }
        Ok(total / batches)
    })
}

/// Everything `fit` produced, including the full loss log.
#[derive(Debug)]
pub struct FitReport {
    pub records: Vec<TrainLogRecord>,
    pub dev_history: Vec<(usize, f64)>,
    pub best_step: usize,
    pub best_dev_loss: f64,
    pub best_path: PathBuf,
    pub last_path: PathBuf,
    pub skipped: Vec<BatchWarning>,
}

/// Deterministic train/dev split over sample indices.
pub fn split_indices(n: usize, dev_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, STREAM_SPLIT);
    for i in (1..indices.len()).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
    let dev_n = ((n as f64 * dev_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let dev = indices[..dev_n].to_vec();
    let train = indices[dev_n..].to_vec();
    (train, dev)
}

/// Trains to `cfg.total_steps`, evaluating the dev split every
/// `eval_every` steps and retaining the lowest-dev-loss checkpoint. Writes
/// `checkpoint_best.bin`, `checkpoint_last.bin` and `loss_log.jsonl` under
/// `out_dir`. Pass `start_step > 0` with a pipeline and optimizer restored
/// from `checkpoint_last.bin` to resume exactly.
#[allow(clippy::too_many_arguments)]
pub fn fit<F: Scalar>(
    pipeline: &Pipeline<F>,
    opt: &mut AdamW<F>,
    samples: &[DialogueSample],
    vocab: &Vocab,
    cfg: &TrainConfig,
    out_dir: &Path,
    start_step: usize,
    mut on_record: Option<&mut dyn FnMut(&TrainLogRecord)>,
) -> Result<FitReport, TrainError> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let (builder, skipped) = BatchBuilder::new(
        samples,
        vocab,
        pipeline.cfg.max_ctx,
        pipeline.cfg.max_resp,
    );
    if builder.is_empty() {
        return Err(TrainError::Config(
            "no usable samples after batch assembly".into(),
        ));
    }
    let (train_idx, dev_idx) = split_indices(builder.len(), cfg.dev_fraction, cfg.seed);
    if dev_idx.is_empty() || train_idx.is_empty() {
        return Err(TrainError::Config(
            "train/dev split left one side empty".into(),
        ));
    }

    let best_path = out_dir.join("checkpoint_best.bin");
    let last_path = out_dir.join("checkpoint_last.bin");
    let log_path = out_dir.join("loss_log.jsonl");
    let mut log_file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;

    let vocab_hash = vocab.content_hash();
    let mut records = Vec::with_capacity(cfg.total_steps - start_step);
    let mut dev_history = Vec::new();
    let mut best = (0usize, f64::INFINITY);
    for step in start_step + 1..=cfg.total_steps {
        let record = train_step(pipeline, opt, &builder, &train_idx, step, cfg)?;
        serde_json::to_writer(&mut log_file, &record)
            .map_err(|e| TrainError::Config(e.to_string()))?;
        log_file.write_all(b"\n")?;
        if let Some(cb) = on_record.as_deref_mut() {
            cb(&record);
        }
        records.push(record);

        if step % cfg.eval_every == 0 || step == cfg.total_steps {
            let dev = dev_loss(pipeline, &builder, &dev_idx, cfg)?;
            dev_history.push((step, dev));
            if dev < best.1 {
                best = (step, dev);
                let meta = CheckpointMeta {
                    config: pipeline.cfg.clone(),
                    vocab_hash: vocab_hash.clone(),
                    step,
                    seed: cfg.seed,
                    dev_loss: Some(dev),
                };
                pipeline.save_checkpoint(&best_path, &meta, None)?;
            }
        }
    }
    let meta = CheckpointMeta {
        config: pipeline.cfg.clone(),
        vocab_hash,
        step: cfg.total_steps,
        seed: cfg.seed,
        dev_loss: dev_history.last().map(|(_, d)| *d),
    };
    pipeline.save_checkpoint(&last_path, &meta, Some(opt))?;

    Ok(FitReport {
        records,
        dev_history,
        best_step: best.0,
        best_dev_loss: best.1,
        best_path,
        last_path,
        skipped,
    })
}
