//! Inference drivers: candidate generation for a context (one encoder pass,
//! many latents), the three evaluation modes, and phase-timed benchmarking.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{BatchBuilder, CorpusError, DialogueSample, SyntheticOracle, Turn};
use crate::diffusion::{sample_latent, DiffusionError, SampleConfig};
use crate::metrics::{best_of_n, bleu_n, distinct_n, synthetic_eval, EvalReport, MetricsError};
use crate::model::ModelError;
use crate::pipeline::Pipeline;
use crate::tensor::Scalar;
use crate::tokenizer::{TokenizerError, Vocab};

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("{0}")]
    Invalid(String),
}

/// Knobs shared by sampling, evaluation and chat.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GenOptions {
    pub n_samples: usize,
    pub steps: usize,
    pub eta: f64,
    pub seed: u64,
    pub beam: usize,
    /// conditioning weight for the latent sampler (see
    /// [`crate::diffusion::SampleConfig::cond_scale`])
    pub cond_scale: f64,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self {
            n_samples: 10,
            steps: 50,
            eta: 0.0,
            seed: 42,
            beam: 5,
            cond_scale: 1.0,
        }
    }
}

/// Generates `n_samples` candidate responses for one context. The context
/// is encoded exactly once; candidate `i` draws its latent with sub-seed
/// `seed + i`, so candidate sets are reproducible. The no-latent ablation
/// decodes deterministically (all candidates identical by construction).
pub fn sample_candidates<F: Scalar>(
    pipeline: &Pipeline<F>,
    vocab: &Vocab,
    context: &[Turn],
    opts: &GenOptions,
) -> Result<Vec<String>, GenerateError> {
    if opts.n_samples == 0 || opts.beam == 0 {
        return Err(GenerateError::Invalid(
            "n_samples and beam must be positive".into(),
        ));
    }
    let probe = DialogueSample {
        context: context.to_vec(),
        response: String::new(),
    };
    let (builder, _) = BatchBuilder::new(
        std::slice::from_ref(&probe),
        vocab,
        pipeline.cfg.max_ctx,
        pipeline.cfg.max_resp,
    );
    let batch = builder.batch(&[0], pipeline.cfg.model.max_turns as u32)?;

    let calls_before = pipeline.model.encode_call_count();
    let enc = crate::tensor::no_grad(|| pipeline.model.encode_context(&batch))?;
    let mut out = Vec::with_capacity(opts.n_samples);
    for i in 0..opts.n_samples {
        let latent = match &pipeline.denoiser {
            Some(denoiser) => Some(sample_latent(
                denoiser,
                &enc,
                &pipeline.schedule,
                SampleConfig {
                    n_steps: opts.steps,
                    eta: opts.eta,
                    seed: opts.seed.wrapping_add(i as u64),
            cond_scale: 1.0,
        },
            )?),
            None => None,
        };
        let ids = pipeline
            .model
            .beam_search(&enc, latent.as_ref(), opts.beam, pipeline.cfg.max_resp)?;
        out.push(vocab.decode(&ids)?);
    }
    debug_assert_eq!(
        pipeline.model.encode_call_count() - calls_before,
        1,
        "the context must be encoded exactly once per sample_candidates call"
    );
    Ok(out)
}

/// Evaluation protocols over a held corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// one candidate per context scored against the reference
    Standard,
    /// best of `n_samples` candidates by sentence BLEU-1 per context
    UpperBound,
    /// `n_samples` candidates per context scored against the oracle;
    /// BLEU fields reflect the first candidate, Distinct fields the whole
    /// sampled corpus
    Synthetic,
}

impl EvalMode {
    pub fn name(&self) -> &'static str {
        match self {
            EvalMode::Standard => "standard",
            EvalMode::UpperBound => "upper_bound",
            EvalMode::Synthetic => "synthetic",
        }
    }
}

/// Runs one evaluation pass. Per-context sub-seeds advance by `n_samples`
/// so candidate pools never overlap between contexts; within a context the
/// standard mode's single candidate equals the upper-bound pool's first.
pub fn evaluate<F: Scalar>(
    pipeline: &Pipeline<F>,
    vocab: &Vocab,
    samples: &[DialogueSample],
    mode: EvalMode,
    opts: &GenOptions,
    oracle: Option<&SyntheticOracle>,
) -> Result<EvalReport, GenerateError> {
    if samples.is_empty() {
        return Err(GenerateError::Invalid("empty evaluation corpus".into()));
    }
    if mode == EvalMode::Synthetic && oracle.is_none() {
        return Err(GenerateError::Invalid(
            "synthetic mode requires the oracle sidecar".into(),
        ));
    }
    let pool_n = match mode {
        EvalMode::Standard => 1,
        _ => opts.n_samples,
    };
    let mut pools: Vec<Vec<String>> = Vec::with_capacity(samples.len());
    for (idx, sample) in samples.iter().enumerate() {
        let ctx_opts = GenOptions {
            n_samples: pool_n,
            seed: opts.seed.wrapping_add((idx * opts.n_samples) as u64),
            ..*opts
        };
        pools.push(sample_candidates(pipeline, vocab, &sample.context, &ctx_opts)?);
    }
    let references: Vec<String> = samples.iter().map(|s| s.response.clone()).collect();

    let scored: Vec<String> = match mode {
        EvalMode::Standard | EvalMode::Synthetic => {
            pools.iter().map(|p| p[0].clone()).collect()
        }
        EvalMode::UpperBound => pools
            .iter()
            .zip(&references)
            .map(|(pool, r)| best_of_n(pool, r).map(str::to_string))
            .collect::<Result<_, _>>()?,
    };

    let distinct_corpus: Vec<String> = match mode {
        EvalMode::Synthetic => pools.iter().flatten().cloned().collect(),
        _ => scored.clone(),
    };

    let mut report = EvalReport {
        mode: mode.name().into(),
        n_contexts: samples.len(),
        n_samples: pool_n,
        steps: opts.steps,
        eta: opts.eta,
        seed: opts.seed,
        bleu1: bleu_n(&scored, &references, 1)?,
        bleu2: bleu_n(&scored, &references, 2)?,
        distinct1: distinct_n(&distinct_corpus, 1)?,
        distinct2: distinct_n(&distinct_corpus, 2)?,
        validity_rate: None,
        mean_distinct_valid: None,
    };
    if let (EvalMode::Synthetic, Some(oracle)) = (mode, oracle) {
        let per_context: Vec<(Vec<Turn>, Vec<String>)> = samples
            .iter()
            .zip(pools)
            .map(|(s, pool)| (s.context.clone(), pool))
            .collect();
        let scores = synthetic_eval(&per_context, oracle)?;
        report.validity_rate = Some(scores.validity_rate);
        report.mean_distinct_valid = Some(scores.mean_distinct_valid);
    }
    Ok(report)
}

/// Wall-clock split of one generation, averaged over contexts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub steps: usize,
    pub encode_s: f64,
    pub denoise_s: f64,
    pub decode_s: f64,
    pub total_s: f64,
    pub contexts: usize,
}

/// Times the three inference phases per step count, one candidate per
/// context. Rows come back sorted by step count.
pub fn bench_phases<F: Scalar>(
    pipeline: &Pipeline<F>,
    vocab: &Vocab,
    contexts: &[Vec<Turn>],
    step_counts: &[usize],
    opts: &GenOptions,
) -> Result<Vec<BenchRow>, GenerateError> {
    if contexts.is_empty() {
        return Err(GenerateError::Invalid("no bench contexts".into()));
    }
    let denoiser = pipeline
        .denoiser
        .as_ref()
        .ok_or_else(|| GenerateError::Invalid("bench requires the latent pathway".into()))?;
    let mut rows = Vec::with_capacity(step_counts.len());
    let mut steps_sorted = step_counts.to_vec();
    steps_sorted.sort_unstable();
    steps_sorted.dedup();
    for &steps in &steps_sorted {
        let (mut enc_s, mut den_s, mut dec_s) = (0.0f64, 0.0f64, 0.0f64);
        for (idx, context) in contexts.iter().enumerate() {
            let probe = DialogueSample {
                context: context.clone(),
                response: String::new(),
            };
            let (builder, _) = BatchBuilder::new(
                std::slice::from_ref(&probe),
                vocab,
                pipeline.cfg.max_ctx,
                pipeline.cfg.max_resp,
            );
            let batch = builder.batch(&[0], pipeline.cfg.model.max_turns as u32)?;
            crate::tensor::no_grad(|| -> Result<(), GenerateError> {
                let t0 = Instant::now();
                let enc = pipeline.model.encode_context(&batch)?;
                let t1 = Instant::now();
                let latent = sample_latent(
                    denoiser,
                    &enc,
                    &pipeline.schedule,
                    SampleConfig {
                        n_steps: steps,
                        eta: opts.eta,
                        seed: opts.seed.wrapping_add(idx as u64),
            cond_scale: 1.0,
        },
                )?;
                let t2 = Instant::now();
                let _ids = pipeline.model.beam_search(
                    &enc,
                    Some(&latent),
                    opts.beam,
                    pipeline.cfg.max_resp,
                )?;
                let t3 = Instant::now();
                enc_s += (t1 - t0).as_secs_f64();
                den_s += (t2 - t1).as_secs_f64();
                dec_s += (t3 - t2).as_secs_f64();
                Ok(())
            })?;
        }
        let n = contexts.len() as f64;
        rows.push(BenchRow {
            steps,
            encode_s: enc_s / n,
            denoise_s: den_s / n,
            decode_s: dec_s / n,
            total_s: (enc_s + den_s + dec_s) / n,
            contexts: contexts.len(),
        });
    }
    Ok(rows)
}
