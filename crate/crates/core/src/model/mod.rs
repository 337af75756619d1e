//! The dialogue model: a BART-style encoder-decoder with four-way input
//! embeddings, a latent-token posterior head, and latent injection into the
//! decoder as a per-layer length-1 key/value memory.

pub mod attention;
pub mod blocks;
pub mod decode;

use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::EncodedBatch;
use crate::tensor::{Scalar, Tensor, TensorError};
use crate::tokenizer::{BOS_ID, LATENT_ID, PAD_ID, SEP_ID};

use attention::{dims3, AttnMask, Linear};
use blocks::{DecoderLayer, EncoderLayer};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Architecture hyperparameters.
///
/// `desk()` is the CPU-scale default used throughout; `full_scale()` records
/// the reference configuration these are scaled down from (6+6 transformer
/// layers, 256/128 sequence limits).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub hidden: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub vocab_size: usize,
    /// dimension of the response latent (kept equal to `hidden`; the
    /// memory projection maps it to one key/value pair per layer)
    pub latent_dim: usize,
    /// turn-distance embeddings cover 1..=max_turns (0 reserved)
    pub max_turns: usize,
    pub max_pos: usize,
    /// false trains/runs the no-latent ablation: no posterior, no memory,
    /// no diffusion
    pub use_latent: bool,
}

impl ModelConfig {
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            hidden: 128,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            ff_hidden: 256,
            vocab_size,
            latent_dim: 128,
            max_turns: 16,
            max_pos: 128,
            use_latent: true,
        }
    }

    /// Reference full-scale shape (needs accelerator-class training budgets).
    pub fn full_scale(vocab_size: usize) -> Self {
        Self {
            hidden: 768,
            enc_layers: 6,
            dec_layers: 6,
            heads: 12,
            ff_hidden: 3072,
            vocab_size,
            latent_dim: 768,
            max_turns: 32,
            max_pos: 512,
            use_latent: true,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden == 0 || self.hidden % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.vocab_size == 0 || self.max_pos == 0 || self.max_turns == 0 {
            return Err(ModelError::Config(
                "vocab_size, max_pos and max_turns must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Context hidden states plus the padding mask they were computed under.
#[derive(Debug, Clone)]
pub struct EncoderOutput<F: Scalar> {
    pub hidden: Tensor<F>,
    pub mask: Vec<bool>,
}

impl<F: Scalar> EncoderOutput<F> {
    pub fn batch(&self) -> usize {
        self.hidden.shape()[0]
    }

    /// Tiles a single-context output across `n` rows for batched decoding.
    /// Detached: only used on inference paths.
    pub fn repeat(&self, n: usize) -> Result<Self, TensorError> {
        let (b, l, d) = dims3(&self.hidden)?;
        if b != 1 {
            return Err(TensorError::Contract(
                "repeat expects a single-context encoder output".into(),
            ));
        }
        let src = self.hidden.data_clone();
        let mut data = Vec::with_capacity(n * src.len());
        let mut mask = Vec::with_capacity(n * self.mask.len());
        for _ in 0..n {
            data.extend_from_slice(&src);
            mask.extend_from_slice(&self.mask);
        }
        Ok(Self {
            hidden: Tensor::from_vec(&[n, l, d], data)?,
            mask,
        })
    }
}

/// Which diffusion stage a latent is in; transitions happen only through
/// the diffusion ops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentKind {
    /// deterministic encoding of a gold response
    Posterior,
    /// forward-corrupted latent
    Noised,
    /// denoiser output
    Denoised,
}

/// A batch of response latents `[B, latent_dim]`.
#[derive(Debug, Clone)]
pub struct LatentState<F: Scalar> {
    pub z: Tensor<F>,
    pub kind: LatentKind,
}

#[derive(Debug)]
struct PosteriorHead<F: Scalar> {
    inner: Linear<F>,
    outer: Linear<F>,
}

/// Encoder-decoder dialogue model with a response-latent pathway.
#[derive(Debug)]
pub struct DialogueModel<F: Scalar> {
    pub cfg: ModelConfig,
    token_emb: Tensor<F>,
    pos_emb: Tensor<F>,
    turn_emb: Tensor<F>,
    role_emb: Tensor<F>,
    emb_norm: attention::LayerNorm<F>,
    encoder: Vec<EncoderLayer<F>>,
    decoder: Vec<DecoderLayer<F>>,
    /// per decoder layer: latent -> [key ; value], shape [latent_dim, 2*hidden]
    memory_proj: Vec<Tensor<F>>,
    posterior: PosteriorHead<F>,
    bow_head: Linear<F>,
    lm_head: Linear<F>,
    encode_calls: Cell<u64>,
}

fn embedding<F: Scalar>(rows: usize, dim: usize, rng: &mut impl Rng) -> Tensor<F> {
    let data: Vec<F> = (0..rows * dim)
        .map(|_| {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            F::from_f64(z * 0.02)
        })
        .collect();
    Tensor::param(&[rows, dim], data).unwrap()
}

impl<F: Scalar> DialogueModel<F> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.hidden;
        let rngr = &mut rng;
        let model = Self {
            token_emb: embedding(cfg.vocab_size, d, rngr),
            pos_emb: embedding(cfg.max_pos, d, rngr),
            turn_emb: embedding(cfg.max_turns + 1, d, rngr),
            role_emb: embedding(2, d, rngr),
            emb_norm: attention::LayerNorm::new(d),
            encoder: (0..cfg.enc_layers)
                .map(|_| EncoderLayer::new(d, cfg.heads, cfg.ff_hidden, rngr))
                .collect(),
            decoder: (0..cfg.dec_layers)
                .map(|_| DecoderLayer::new(d, cfg.heads, cfg.ff_hidden, rngr))
                .collect(),
            memory_proj: (0..cfg.dec_layers)
                .map(|_| attention::xavier(cfg.latent_dim, 2 * d, rngr))
                .collect(),
            posterior: PosteriorHead {
                inner: Linear::new(d, d, rngr),
                outer: Linear::new(d, cfg.latent_dim, rngr),
            },
            bow_head: Linear::new(cfg.latent_dim, cfg.vocab_size, rngr),
            lm_head: Linear::new(d, cfg.vocab_size, rngr),
            encode_calls: Cell::new(0),
            cfg,
        };
        Ok(model)
    }

    /// How many times the context encoder has run (amortization checks).
    pub fn encode_call_count(&self) -> u64 {
        self.encode_calls.get()
    }

    /// Named leaf parameters in a fixed order. With `use_latent` off, the
    /// latent pathway (posterior head, memory projections, BOW head) is
    /// excluded so the ablation neither trains nor serializes it.
    pub fn named_params(&self) -> Vec<(String, Tensor<F>)> {
        let mut out: Vec<(String, Tensor<F>)> = Vec::new();
        {
            let mut push = |name: String, t: &Tensor<F>| out.push((name, t.clone()));
            push("emb.token".into(), &self.token_emb);
            push("emb.pos".into(), &self.pos_emb);
            push("emb.turn".into(), &self.turn_emb);
            push("emb.role".into(), &self.role_emb);
            self.emb_norm.visit("emb.norm", &mut push);
            for (i, layer) in self.encoder.iter().enumerate() {
                layer.visit(&format!("encoder.{i}"), &mut push);
            }
            for (i, layer) in self.decoder.iter().enumerate() {
                layer.visit(&format!("decoder.{i}"), &mut push);
            }
            if self.cfg.use_latent {
                for (i, w) in self.memory_proj.iter().enumerate() {
                    push(format!("memory.{i}.proj"), w);
                }
                self.posterior.inner.visit("posterior.inner", &mut push);
                self.posterior.outer.visit("posterior.outer", &mut push);
                self.bow_head.visit("bow_head", &mut push);
            }
            self.lm_head.visit("lm_head", &mut push);
        }
        out
    }

    /// Zeroes every memory projection in place (test hook for the latent
    /// independence invariant).
    pub fn zero_memory_projections(&self) {
        for w in &self.memory_proj {
            w.set_data(&vec![F::zero(); w.numel()]);
        }
    }

    fn embed(
        &self,
        tokens: &[u32],
        pos: &[u32],
        turns: Option<&[u32]>,
        roles: Option<&[u32]>,
        rows: usize,
    ) -> Result<Tensor<F>, ModelError> {
        let len = tokens.len() / rows;
        let d = self.cfg.hidden;
        let mut x = self
            .token_emb
            .select_rows(tokens)?
            .add(&self.pos_emb.select_rows(pos)?)?;
        if let Some(turns) = turns {
            x = x.add(&self.turn_emb.select_rows(turns)?)?;
        }
        if let Some(roles) = roles {
            x = x.add(&self.role_emb.select_rows(roles)?)?;
        }
        let x = x.reshape(&[rows, len, d])?;
        Ok(self.emb_norm.forward(&x)?)
    }

    /// Runs the context encoder: summed token/turn/role/position embeddings
    /// through the self-attention stack under the padding mask.
    pub fn encode_context(&self, batch: &EncodedBatch) -> Result<EncoderOutput<F>, ModelError> {
        self.encode_calls.set(self.encode_calls.get() + 1);
        let b = batch.batch;
        let mut x = self.embed(
            &batch.ctx_tokens,
            &batch.ctx_pos,
            Some(&batch.ctx_turns),
            Some(&batch.ctx_roles),
            b,
        )?;
        let mask = AttnMask::padding(&batch.ctx_mask, b, batch.ctx_len);
        for layer in &self.encoder {
            x = layer.forward(&x, &mask)?;
        }
        Ok(EncoderOutput {
            hidden: x,
            mask: batch.ctx_mask.clone(),
        })
    }

    /// Encodes `[latent-token ; response]` with the same encoder (token and
    /// position embeddings only) and pools the latent token's final hidden
    /// state through the posterior MLP.
    pub fn encode_posterior(&self, batch: &EncodedBatch) -> Result<LatentState<F>, ModelError> {
        let b = batch.batch;
        let l = batch.resp_len;
        for r in 0..b {
            if batch.post_input[r * l] != LATENT_ID {
                return Err(ModelError::Contract(format!(
                    "posterior input row {r} does not start with the latent token"
                )));
            }
        }
        let pos: Vec<u32> = (0..(b * l) as u32).map(|i| i % l as u32).collect();
        let mut x = self.embed(&batch.post_input, &pos, None, None, b)?;
        let mask = AttnMask::padding(&batch.resp_mask, b, l);
        for layer in &self.encoder {
            x = layer.forward(&x, &mask)?;
        }
        let pooled = x.narrow(1, 0, 1)?.reshape(&[b, self.cfg.hidden])?;
        let z = self
            .posterior
            .outer
            .forward(&self.posterior.inner.forward(&pooled)?.gelu())?;
        Ok(LatentState {
            z,
            kind: LatentKind::Posterior,
        })
    }

    /// Projects the latent into the length-1 key/value memory for decoder
    /// layer `layer_index`.
    pub fn memory_kv(
        &self,
        z: &LatentState<F>,
        layer_index: usize,
    ) -> Result<(Tensor<F>, Tensor<F>), ModelError> {
        let w = self
            .memory_proj
            .get(layer_index)
            .ok_or_else(|| ModelError::Contract(format!("no decoder layer {layer_index}")))?;
        let b = z.z.shape()[0];
        let d = self.cfg.hidden;
        let joint = z.z.matmul(w)?; // [B, 2d]
        let key = joint.narrow(1, 0, d)?.reshape(&[b, 1, d])?;
        let value = joint.narrow(1, d, d)?.reshape(&[b, 1, d])?;
        Ok((key, value))
    }

    /// Teacher-forced decoder logits `[B, Lr, vocab]`. `z` may be a
    /// posterior or denoised latent; `None` runs the no-latent path.
    pub fn decode_logits(
        &self,
        resp_input: &[u32],
        resp_mask: &[bool],
        rows: usize,
        enc: &EncoderOutput<F>,
        z: Option<&LatentState<F>>,
    ) -> Result<Tensor<F>, ModelError> {
        if let Some(z) = z {
            if z.kind == LatentKind::Noised {
                return Err(ModelError::Contract(
                    "decoder conditioning requires a posterior or denoised latent".into(),
                ));
            }
        }
        let l = resp_input.len() / rows;
        let pos: Vec<u32> = (0..(rows * l) as u32).map(|i| i % l as u32).collect();
        let mut x = self.embed(resp_input, &pos, None, None, rows)?;
        let mem_slots = usize::from(z.is_some());
        let self_mask = AttnMask::causal_with_memory(resp_mask, rows, l, mem_slots);
        let cross_mask = AttnMask::padding(&enc.mask, rows, l);
        for (i, layer) in self.decoder.iter().enumerate() {
            let memory = match z {
                Some(z) => Some(self.memory_kv(z, i)?),
                None => None,
            };
            let mem_ref = memory.as_ref().map(|(k, v)| (k, v));
            x = layer.forward(&x, mem_ref, &self_mask, &enc.hidden, &cross_mask)?;
        }
        Ok(self.lm_head.forward(&x)?)
    }

    /// Vocabulary logits predicted from the latent alone `[B, vocab]`.
    pub fn bow_logits(&self, z: &LatentState<F>) -> Result<Tensor<F>, ModelError> {
        Ok(self.bow_head.forward(&z.z)?)
    }

    /// Bag-of-words loss: mean over non-pad response tokens of the latent's
    /// negative log-probability for that token, order ignored. Uses the
    /// posterior latent (computed before any denoising).
    pub fn bow_loss(
        &self,
        z0: &LatentState<F>,
        batch: &EncodedBatch,
    ) -> Result<Tensor<F>, ModelError> {
        if z0.kind != LatentKind::Posterior {
            return Err(ModelError::Contract(
                "bow_loss consumes the posterior latent".into(),
            ));
        }
        let logits = self.bow_logits(z0)?; // [B, V]
        let l = batch.resp_len;
        let mut rows: Vec<u32> = Vec::new();
        let mut targets: Vec<u32> = Vec::new();
        for r in 0..batch.batch {
            for j in 0..l {
                let t = batch.bow_targets[r * l + j];
                if t != PAD_ID {
                    rows.push(r as u32);
                    targets.push(t);
                }
            }
        }
        let gathered = logits.select_rows(&rows)?;
        Ok(gathered.cross_entropy_logits(&targets, PAD_ID)?)
    }

    /// Teacher-forced token NLL against the shifted targets, PAD ignored.
    /// Training conditions on the denoiser output, closing the train/infer
    /// gap; the no-latent ablation passes `None`.
    pub fn nll_loss(
        &self,
        batch: &EncodedBatch,
        enc: &EncoderOutput<F>,
        z: Option<&LatentState<F>>,
    ) -> Result<Tensor<F>, ModelError> {
        if let Some(z) = z {
            if z.kind != LatentKind::Denoised {
                return Err(ModelError::Contract(
                    "nll_loss conditions on the denoised latent, not the posterior".into(),
                ));
            }
        }
        let logits =
            self.decode_logits(&batch.resp_input, &batch.resp_mask, batch.batch, enc, z)?;
        let flat = logits.reshape(&[batch.batch * batch.resp_len, self.cfg.vocab_size])?;
        Ok(flat.cross_entropy_logits(&batch.resp_target, PAD_ID)?)
    }

    /// Beam-search decode for a single context, ranked by length-normalized
    /// log-probability. Returns response token ids (no specials). `z` as in
    /// [`Self::decode_logits`].
    pub fn beam_search(
        &self,
        enc: &EncoderOutput<F>,
        z: Option<&LatentState<F>>,
        beam_size: usize,
        max_len: usize,
    ) -> Result<Vec<u32>, ModelError> {
        use crate::tokenizer::EOS_ID;
        if enc.batch() != 1 {
            return Err(ModelError::Contract(
                "beam_search decodes one context at a time".into(),
            ));
        }
        let cfg = decode::BeamConfig {
            beam_size,
            max_len,
            eos_id: EOS_ID,
            bos_id: BOS_ID,
            banned: vec![PAD_ID, BOS_ID, LATENT_ID, SEP_ID],
        };
        crate::tensor::no_grad(|| {
            let mut step = |prefixes: &[Vec<u32>]| -> Result<Vec<Vec<f64>>, ModelError> {
                let n = prefixes.len();
                let l = prefixes[0].len();
                let mut ids = Vec::with_capacity(n * l);
                for p in prefixes {
                    debug_assert_eq!(p.len(), l);
                    ids.extend_from_slice(p);
                }
                let mask = vec![true; n * l];
                let enc_n = enc.repeat(n)?;
                let z_n = match z {
                    Some(state) => Some(LatentState {
                        z: tile_rows(&state.z, n)?,
                        kind: state.kind,
                    }),
                    None => None,
                };
                let logits = self.decode_logits(&ids, &mask, n, &enc_n, z_n.as_ref())?;
                let v = self.cfg.vocab_size;
                let data = logits.data();
                let mut out = Vec::with_capacity(n);
                for r in 0..n {
                    let base = (r * l + (l - 1)) * v;
                    let row: Vec<f64> =
                        data[base..base + v].iter().map(|&x| x.to_f64()).collect();
                    out.push(decode::log_softmax(&row));
                }
                Ok(out)
            };
            decode::beam_search_with(&mut step, &cfg)
        })
    }
}

/// Repeats the rows of a `[1, d]` tensor `n` times (detached).
fn tile_rows<F: Scalar>(t: &Tensor<F>, n: usize) -> Result<Tensor<F>, TensorError> {
    let d = t.shape()[1];
    let src = t.data_clone();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        data.extend_from_slice(&src);
    }
    Tensor::from_vec(&[n, d], data)
}
