//! Flat key-value run configuration (TOML). Unknown keys are rejected so
//! typos surface before any work starts.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use latentchat::diffusion::DenoiserConfig;
use latentchat::model::ModelConfig;
use latentchat::pipeline::PipelineConfig;
use latentchat::training::TrainConfig;
use serde::{Deserialize, Serialize};

fn d_seed() -> u64 { 42 }
fn d_vocab_size() -> u32 { 512 }
fn d_hidden() -> usize { 128 }
fn d_layers() -> usize { 2 }
fn d_heads() -> usize { 4 }
fn d_ff() -> usize { 256 }
fn d_max_turns() -> usize { 16 }
fn d_max_pos() -> usize { 128 }
fn d_use_latent() -> bool { true }
fn d_time_dim() -> usize { 128 }
fn d_t_max() -> usize { 200 }
fn d_s() -> f64 { 1e-4 }
fn d_max_ctx() -> usize { 64 }
fn d_max_resp() -> usize { 24 }
fn d_total_steps() -> usize { 3000 }
fn d_batch_size() -> usize { 32 }
fn d_peak_lr() -> f64 { 1e-4 }
fn d_init_lr() -> f64 { 1e-7 }
fn d_warmup() -> usize { 300 }
fn d_weight_decay() -> f64 { 0.01 }
fn d_clip() -> f64 { 1.0 }
fn d_eval_every() -> usize { 250 }
fn d_dev_fraction() -> f64 { 0.1 }
fn d_weight() -> f64 { 1.0 }
fn d_ctx_dropout() -> f64 { 0.0 }
fn d_out_dir() -> PathBuf { PathBuf::from("runs/latest") }

/// One flat document covering corpus paths, architecture, schedule and
/// optimization. Every field has a desk-scale default.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "d_seed")]
    pub seed: u64,
    /// JSONL training corpus
    pub corpus: PathBuf,
    #[serde(default)]
    pub oracle: Option<PathBuf>,
    #[serde(default = "d_out_dir")]
    pub out_dir: PathBuf,

    #[serde(default = "d_vocab_size")]
    pub vocab_size: u32,

    #[serde(default = "d_hidden")]
    pub hidden: usize,
    #[serde(default = "d_layers")]
    pub enc_layers: usize,
    #[serde(default = "d_layers")]
    pub dec_layers: usize,
    #[serde(default = "d_heads")]
    pub heads: usize,
    #[serde(default = "d_ff")]
    pub ff_hidden: usize,
    #[serde(default = "d_hidden")]
    pub latent_dim: usize,
    #[serde(default = "d_max_turns")]
    pub max_turns: usize,
    #[serde(default = "d_max_pos")]
    pub max_pos: usize,
    #[serde(default = "d_use_latent")]
    pub use_latent: bool,

    #[serde(default = "d_layers")]
    pub denoiser_layers: usize,
    #[serde(default = "d_ff")]
    pub denoiser_ff: usize,
    #[serde(default = "d_time_dim")]
    pub time_dim: usize,

    #[serde(default = "d_t_max")]
    pub t_max: usize,
    #[serde(default = "d_s")]
    pub s: f64,

    #[serde(default = "d_max_ctx")]
    pub max_ctx: usize,
    #[serde(default = "d_max_resp")]
    pub max_resp: usize,

    #[serde(default = "d_total_steps")]
    pub total_steps: usize,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default = "d_peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "d_init_lr")]
    pub init_lr: f64,
    #[serde(default = "d_warmup")]
    pub warmup_steps: usize,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "d_clip")]
    pub clip_norm: f64,
    #[serde(default = "d_eval_every")]
    pub eval_every: usize,
    #[serde(default = "d_dev_fraction")]
    pub dev_fraction: f64,
    #[serde(default = "d_weight")]
    pub w_nll: f64,
    #[serde(default = "d_weight")]
    pub w_bow: f64,
    #[serde(default = "d_weight")]
    pub w_ld: f64,
    #[serde(default = "d_ctx_dropout")]
    pub ctx_dropout: f64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Field-by-field validation, run before any work.
    pub fn validate(&self) -> Result<()> {
        if self.s <= 0.0 || self.s >= 1.0 {
            bail!("config field `s`: must lie strictly between 0 and 1, got {}", self.s);
        }
        if self.t_max == 0 {
            bail!("config field `t_max`: must be >= 1");
        }
        if self.vocab_size as usize <= latentchat::tokenizer::BASE_VOCAB as usize {
            bail!(
                "config field `vocab_size`: must exceed the base alphabet ({})",
                latentchat::tokenizer::BASE_VOCAB
            );
        }
        if self.hidden == 0 || self.hidden % self.heads != 0 {
            bail!(
                "config field `hidden`: must be a positive multiple of `heads` ({})",
                self.heads
            );
        }
        if self.warmup_steps >= self.total_steps {
            bail!(
                "config field `warmup_steps`: {} must be below `total_steps` {}",
                self.warmup_steps,
                self.total_steps
            );
        }
        if self.dev_fraction <= 0.0 || self.dev_fraction >= 1.0 {
            bail!("config field `dev_fraction`: must lie strictly between 0 and 1");
        }
        if self.peak_lr <= 0.0 || self.init_lr <= 0.0 {
            bail!("config fields `peak_lr`/`init_lr`: must be positive");
        }
        // architecture-level coupling checks
        self.pipeline_config(self.vocab_size as usize)
            .validate()
            .map_err(|e| anyhow::anyhow!("config: {e}"))?;
        Ok(())
    }

    /// Architecture config once the actual trained vocab size is known.
    pub fn pipeline_config(&self, vocab_size: usize) -> PipelineConfig {
        PipelineConfig {
            model: ModelConfig {
                hidden: self.hidden,
                enc_layers: self.enc_layers,
                dec_layers: self.dec_layers,
                heads: self.heads,
                ff_hidden: self.ff_hidden,
                vocab_size,
                latent_dim: self.latent_dim,
                max_turns: self.max_turns,
                max_pos: self.max_pos,
                use_latent: self.use_latent,
            },
            denoiser: DenoiserConfig {
                layers: self.denoiser_layers,
                hidden: self.hidden,
                heads: self.heads,
                ff_hidden: self.denoiser_ff,
                latent_dim: self.latent_dim,
                time_dim: self.time_dim,
            },
            schedule: latentchat::diffusion::ScheduleConfig {
                t_max: self.t_max,
                s: self.s,
            },
            max_ctx: self.max_ctx,
            max_resp: self.max_resp,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            total_steps: self.total_steps,
            batch_size: self.batch_size,
            peak_lr: self.peak_lr,
            init_lr: self.init_lr,
            warmup_steps: self.warmup_steps,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            seed: self.seed,
            eval_every: self.eval_every,
            dev_fraction: self.dev_fraction,
            w_nll: self.w_nll,
            w_bow: self.w_bow,
            w_ld: self.w_ld,
            ctx_dropout: self.ctx_dropout,
        }
    }
}
