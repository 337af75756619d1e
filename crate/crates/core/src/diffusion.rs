//! Latent diffusion: sqrt noise schedule, closed-form forward corruption,
//! the transformer latent denoiser, and the step-skipping reverse sampler.
//!
//! The denoiser predicts the clean latent directly (z0-parameterization):
//! at inference each visited timestep produces a clean estimate which is
//! re-noised down to the next timestep in the subsequence, deterministically
//! at `eta = 0` and with fresh noise at `eta = 1`.

use std::cell::Cell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::attention::{AttnMask, LayerNorm, Linear};
use crate::model::blocks::DecoderLayer;
use crate::model::{EncoderOutput, LatentKind, LatentState};
use crate::tensor::{no_grad, Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid schedule config: {0}")]
    Config(String),
    #[error("timestep {t} out of range 1..={t_max}")]
    TimestepOutOfRange { t: usize, t_max: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

const ALPHA_BAR_FLOOR: f64 = 1e-5;
const BETA_CEIL: f64 = 0.999;

/// Evaluates the sqrt-schedule signal level at continuous `t` before
/// clipping: `1 - sqrt(t / t_max + s)`.
pub fn raw_alpha_bar(t: f64, t_max: usize, s: f64) -> f64 {
    1.0 - (t / t_max as f64 + s).sqrt()
}

/// Per-step noise constants for the forward and reverse processes.
///
/// `alpha_bar[0] = 1` exactly, so the final sampler step emits the clean
/// estimate unchanged.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub t_max: usize,
    pub s: f64,
    alpha_bar: Vec<f64>,
    beta: Vec<f64>,
    alpha: Vec<f64>,
}

/// (T, s) pair stored in configs so the derived table is reproducible
/// across checkpoint reloads; the table itself is never serialized.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ScheduleConfig {
    pub t_max: usize,
    pub s: f64,
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule, DiffusionError> {
        build_sqrt_schedule(self.t_max, self.s)
    }
}

/// Builds the sqrt schedule: signal level `1 - sqrt(t/T + s)` clipped to
/// `(1e-5, 1)`, with `beta_t = 1 - alpha_bar_t / alpha_bar_{t-1}` capped at
/// 0.999.
pub fn build_sqrt_schedule(t_max: usize, s: f64) -> Result<NoiseSchedule, DiffusionError> {
    if t_max < 1 {
        return Err(DiffusionError::Config("t_max must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&s) || s == 0.0 {
        return Err(DiffusionError::Config(format!(
            "s must lie strictly between 0 and 1, got {s}"
        )));
    }
    let mut alpha_bar = Vec::with_capacity(t_max + 1);
    alpha_bar.push(1.0);
    for t in 1..=t_max {
        let raw = raw_alpha_bar(t as f64, t_max, s);
        alpha_bar.push(raw.clamp(ALPHA_BAR_FLOOR, 1.0));
    }
    let mut beta = vec![f64::NAN]; // beta[0] unused
    let mut alpha = vec![f64::NAN];
    for t in 1..=t_max {
        if alpha_bar[t] >= alpha_bar[t - 1] {
            return Err(DiffusionError::Config(format!(
                "signal level not strictly decreasing at t={t}; lower t_max or s"
            )));
        }
        let b = (1.0 - alpha_bar[t] / alpha_bar[t - 1]).min(BETA_CEIL);
        if !(0.0 < b && b < 1.0) {
            return Err(DiffusionError::Config(format!(
                "beta out of (0,1) at t={t}: {b}"
            )));
        }
        beta.push(b);
        alpha.push(1.0 - b);
    }
    Ok(NoiseSchedule {
        t_max,
        s,
        alpha_bar,
        beta,
        alpha,
    })
}

impl NoiseSchedule {
    /// Cumulative signal level at `t` (0..=t_max).
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Single-step noise scale at `t` (1..=t_max).
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    fn check_t(&self, t: usize) -> Result<(), DiffusionError> {
        if t < 1 || t > self.t_max {
            return Err(DiffusionError::TimestepOutOfRange {
                t,
                t_max: self.t_max,
            });
        }
        Ok(())
    }
}

/// Closed-form forward corruption: `z_t = sqrt(ab_t) z0 + sqrt(1-ab_t) eps`,
/// one timestep per batch row.
pub fn q_sample<F: Scalar>(
    z0: &LatentState<F>,
    ts: &[usize],
    eps: &Tensor<F>,
    schedule: &NoiseSchedule,
) -> Result<LatentState<F>, DiffusionError> {
    if z0.kind != LatentKind::Posterior {
        return Err(DiffusionError::Contract(
            "q_sample corrupts the posterior latent".into(),
        ));
    }
    let shape = z0.z.shape().to_vec();
    if shape.len() != 2 || shape[0] != ts.len() || eps.shape() != shape {
        return Err(DiffusionError::Contract(format!(
            "q_sample shape mismatch: z {shape:?}, eps {:?}, ts {}",
            eps.shape(),
            ts.len()
        )));
    }
    let d = shape[1];
    let mut signal = vec![F::zero(); shape[0] * d];
    let mut noise = vec![F::zero(); shape[0] * d];
    for (r, &t) in ts.iter().enumerate() {
        schedule.check_t(t)?;
        let ab = schedule.alpha_bar(t);
        let sc = F::from_f64(ab.sqrt());
        let nc = F::from_f64((1.0 - ab).sqrt());
        for j in 0..d {
            signal[r * d + j] = sc;
            noise[r * d + j] = nc;
        }
    }
    let signal = Tensor::from_vec(&shape, signal)?;
    let noise = Tensor::from_vec(&shape, noise)?;
    let z_t = z0.z.mul(&signal)?.add(&eps.mul(&noise)?)?;
    Ok(LatentState {
        z: z_t,
        kind: LatentKind::Noised,
    })
}

/// Mean squared error between the denoised estimate and the clean latent
/// (mean over batch and latent dimensions).
pub fn ld_loss<F: Scalar>(
    denoised: &LatentState<F>,
    z0: &LatentState<F>,
) -> Result<Tensor<F>, DiffusionError> {
    if denoised.kind != LatentKind::Denoised || z0.kind != LatentKind::Posterior {
        return Err(DiffusionError::Contract(
            "ld_loss compares the denoised estimate against the posterior".into(),
        ));
    }
    if denoised.z.shape() != z0.z.shape() {
        return Err(DiffusionError::Contract(format!(
            "ld_loss shape mismatch: {:?} vs {:?}",
            denoised.z.shape(),
            z0.z.shape()
        )));
    }
    let diff = denoised.z.sub(&z0.z)?;
    Ok(diff.mul(&diff)?.mean_all())
}

/// Denoiser shape. `time_dim`-dimensional sinusoidal timestep embeddings are
/// projected to the hidden size and added to the projected latent before the
/// first block. The reference full-scale denoiser uses 6 layers and a
/// 128-dimensional timestep embedding.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub latent_dim: usize,
    pub time_dim: usize,
}

impl DenoiserConfig {
    pub fn desk(hidden: usize, latent_dim: usize) -> Self {
        Self {
            layers: 2,
            hidden,
            heads: 4,
            ff_hidden: 2 * hidden,
            latent_dim,
            time_dim: 128,
        }
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        if self.hidden == 0 || self.hidden % self.heads != 0 {
            return Err(DiffusionError::Config(format!(
                "hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.time_dim % 2 != 0 || self.time_dim == 0 {
            return Err(DiffusionError::Config(
                "time_dim must be a positive even number".into(),
            ));
        }
        Ok(())
    }
}

/// Transformer latent denoiser: the noised latent is a single position that
/// cross-attends to the fixed context hidden states.
#[derive(Debug)]
pub struct Denoiser<F: Scalar> {
    pub cfg: DenoiserConfig,
    proj_in: Linear<F>,
    time_proj: Linear<F>,
    layers: Vec<DecoderLayer<F>>,
    final_norm: LayerNorm<F>,
    proj_out: Linear<F>,
    denoise_calls: Cell<u64>,
}

impl<F: Scalar> Denoiser<F> {
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Result<Self, DiffusionError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        Ok(Self {
            proj_in: Linear::new(cfg.latent_dim, cfg.hidden, r),
            time_proj: Linear::new(cfg.time_dim, cfg.hidden, r),
            layers: (0..cfg.layers)
                .map(|_| DecoderLayer::new(cfg.hidden, cfg.heads, cfg.ff_hidden, r))
                .collect(),
            final_norm: LayerNorm::new(cfg.hidden),
            proj_out: Linear::new(cfg.hidden, cfg.latent_dim, r),
            denoise_calls: Cell::new(0),
            cfg,
        })
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<F>)> {
        let mut out: Vec<(String, Tensor<F>)> = Vec::new();
        {
            let mut push = |name: String, t: &Tensor<F>| out.push((name, t.clone()));
            self.proj_in.visit("denoiser.proj_in", &mut push);
            self.time_proj.visit("denoiser.time_proj", &mut push);
            for (i, layer) in self.layers.iter().enumerate() {
                layer.visit(&format!("denoiser.layer.{i}"), &mut push);
            }
            self.final_norm.visit("denoiser.final_norm", &mut push);
            self.proj_out.visit("denoiser.proj_out", &mut push);
        }
        out
    }

    /// How many single-step denoise evaluations have run (sampler checks).
    pub fn denoise_call_count(&self) -> u64 {
        self.denoise_calls.get()
    }

    fn timestep_embedding(&self, ts: &[usize]) -> Tensor<F> {
        let dim = self.cfg.time_dim;
        let half = dim / 2;
        let mut data = Vec::with_capacity(ts.len() * dim);
        for &t in ts {
            for i in 0..half {
                let freq = (-(i as f64) * (10000f64).ln() / half as f64).exp();
                data.push(F::from_f64((t as f64 * freq).sin()));
            }
            for i in 0..half {
                let freq = (-(i as f64) * (10000f64).ln() / half as f64).exp();
                data.push(F::from_f64((t as f64 * freq).cos()));
            }
        }
        Tensor::from_vec(&[ts.len(), dim], data).expect("timestep embedding shape")
    }

    /// Predicts the clean latent from `(z_t, t, context)`, one timestep per
    /// batch row.
    pub fn denoise(
        &self,
        z_t: &LatentState<F>,
        ts: &[usize],
        enc: &EncoderOutput<F>,
        schedule: &NoiseSchedule,
    ) -> Result<LatentState<F>, DiffusionError> {
        if z_t.kind == LatentKind::Posterior {
            return Err(DiffusionError::Contract(
                "denoise consumes a noised latent, not the posterior".into(),
            ));
        }
        let b = z_t.z.shape()[0];
        if ts.len() != b {
            return Err(DiffusionError::Contract(format!(
                "denoise: {} timesteps for batch {b}",
                ts.len()
            )));
        }
        for &t in ts {
            schedule.check_t(t)?;
        }
        self.denoise_calls.set(self.denoise_calls.get() + 1);
        let d = self.cfg.hidden;
        let x = self
            .proj_in
            .forward(&z_t.z)?
            .add(&self.time_proj.forward(&self.timestep_embedding(ts))?)?
            .reshape(&[b, 1, d])?;
        let self_mask = AttnMask::causal_with_memory(&vec![true; b], b, 1, 0);
        let ctx_len = enc.mask.len() / enc.batch();
        let cross_mask = AttnMask::padding(&enc.mask, b, 1);
        debug_assert_eq!(ctx_len * b, enc.mask.len());
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(&h, None, &self_mask, &enc.hidden, &cross_mask)?;
        }
        let pooled = self.final_norm.forward(&h)?.reshape(&[b, d])?;
        let z0_hat = self.proj_out.forward(&pooled)?;
        Ok(LatentState {
            z: z0_hat,
            kind: LatentKind::Denoised,
        })
    }
}

/// The decreasing timestep subsequence visited by the sampler: `n_steps`
/// values evenly spaced over `[1, t_max]` including `t_max`, rounded and
/// deduplicated.
pub fn ddim_timesteps(t_max: usize, n_steps: usize) -> Result<Vec<usize>, DiffusionError> {
    if n_steps < 1 || n_steps > t_max {
        return Err(DiffusionError::Config(format!(
            "n_steps must lie in 1..={t_max}, got {n_steps}"
        )));
    }
    if n_steps == 1 {
        return Ok(vec![t_max]);
    }
    let mut ts = Vec::with_capacity(n_steps);
    for i in 0..n_steps {
        let t = t_max as f64 - i as f64 * (t_max as f64 - 1.0) / (n_steps as f64 - 1.0);
        let t = t.round() as usize;
        if ts.last() != Some(&t) {
            ts.push(t);
        }
    }
    debug_assert!(ts.windows(2).all(|w| w[0] > w[1]));
    Ok(ts)
}

#[derive(Debug, Clone, Copy)]
pub struct SampleConfig {
    pub n_steps: usize,
    /// 0 = deterministic step-skipping; 1 = fresh re-noising each step
    pub eta: f64,
    pub seed: u64,
    /// conditioning weight on the clean-latent estimate: 1 keeps the plain
    /// conditional prediction (one denoise per visited step); values below 1
    /// blend toward a context-masked prediction, which keeps mode choice
    /// with the noise trajectory when a small corpus lets the conditional
    /// pathway collapse onto one response per context
    pub cond_scale: f64,
}

impl SampleConfig {
    pub fn new(n_steps: usize, eta: f64, seed: u64) -> Self {
        Self {
            n_steps,
            eta,
            seed,
            cond_scale: 1.0,
        }
    }
}

/// Reverse-process sampling: starts from unit Gaussian noise and walks the
/// timestep subsequence, predicting the clean latent at each visited step
/// and jumping to the next one. The context encoding is an input and is
/// never recomputed here. Returns the final clean estimate exactly.
pub fn sample_latent<F: Scalar>(
    denoiser: &Denoiser<F>,
    enc: &EncoderOutput<F>,
    schedule: &NoiseSchedule,
    cfg: SampleConfig,
) -> Result<LatentState<F>, DiffusionError> {
    if !(0.0..=1.0).contains(&cfg.eta) {
        return Err(DiffusionError::Config(format!(
            "eta must lie in [0,1], got {}",
            cfg.eta
        )));
    }
    if !(0.0..=2.0).contains(&cfg.cond_scale) {
        return Err(DiffusionError::Config(format!(
            "cond_scale must lie in [0,2], got {}",
            cfg.cond_scale
        )));
    }
    let masked_enc = (cfg.cond_scale != 1.0).then(|| EncoderOutput {
        hidden: enc.hidden.clone(),
        mask: vec![false; enc.mask.len()],
    });
    let ts = ddim_timesteps(schedule.t_max, cfg.n_steps)?;
    let b = enc.batch();
    let dz = denoiser.cfg.latent_dim;
    no_grad(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut z = LatentState {
            z: Tensor::randn(&[b, dz], 1.0, &mut rng),
            kind: LatentKind::Noised,
        };
        let mut clean = None;
        for (i, &t) in ts.iter().enumerate() {
            let mut estimate = denoiser.denoise(&z, &vec![t; b], enc, schedule)?;
            if let Some(masked) = &masked_enc {
                // blend toward the context-free estimate
                let uncond = denoiser.denoise(&z, &vec![t; b], masked, schedule)?;
                let w = F::from_f64(cfg.cond_scale);
                let blended = uncond
                    .z
                    .add(&estimate.z.sub(&uncond.z)?.mul_scalar(w))?;
                estimate = LatentState {
                    z: blended,
                    kind: LatentKind::Denoised,
                };
            }
            let next_t = ts.get(i + 1).copied().unwrap_or(0);
            if next_t == 0 {
                clean = Some(estimate);
                break;
            }
            let ab_t = schedule.alpha_bar(t);
            let ab_n = schedule.alpha_bar(next_t);
            let sigma = cfg.eta * (1.0 - ab_n).sqrt();
            let dir_scale = (1.0 - ab_n - sigma * sigma).max(0.0).sqrt();
            // noise direction implied by (z_t, clean estimate)
            let implied = z
                .z
                .sub(&estimate.z.mul_scalar(F::from_f64(ab_t.sqrt())))?
                .mul_scalar(F::from_f64(1.0 / (1.0 - ab_t).sqrt()));
            let mut next = estimate
                .z
                .mul_scalar(F::from_f64(ab_n.sqrt()))
                .add(&implied.mul_scalar(F::from_f64(dir_scale)))?;
            if cfg.eta > 0.0 {
                let fresh = Tensor::randn(&[b, dz], 1.0, &mut rng);
                next = next.add(&fresh.mul_scalar(F::from_f64(sigma)))?;
            }
            z = LatentState {
                z: next,
                kind: LatentKind::Noised,
            };
        }
        let clean = clean.expect("subsequence ends at t=1");
        if !clean.z.all_finite() {
            return Err(DiffusionError::Contract(
                "sampler produced a non-finite latent".into(),
            ));
        }
        Ok(clean)
    })
}
