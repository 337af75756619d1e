//! The trained artifact as a unit: dialogue model, latent denoiser and the
//! noise schedule they were trained under, plus the checkpoint format.
//!
//! Checkpoint layout: magic, format version, a JSON metadata block
//! (configs, vocab hash, step, seed), the flat parameter container, and an
//! optional optimizer section (moment containers + step count) so training
//! can resume exactly.

use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{Denoiser, DenoiserConfig, DiffusionError, NoiseSchedule, ScheduleConfig};
use crate::model::{DialogueModel, ModelConfig, ModelError};
use crate::tensor::{AdamW, AdamWConfig, ParamStore, Scalar, Tensor, TensorError};

const MAGIC: &[u8; 4] = b"LCCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Everything needed to rebuild the architecture from a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    /// token budget for assembled context rows
    pub max_ctx: usize,
    /// token budget for responses
    pub max_resp: usize,
}

impl PipelineConfig {
    pub fn desk(vocab_size: usize) -> Self {
        let model = ModelConfig::desk(vocab_size);
        let denoiser = DenoiserConfig::desk(model.hidden, model.latent_dim);
        Self {
            model,
            denoiser,
            schedule: ScheduleConfig {
                t_max: 200,
                s: 1e-4,
            },
            max_ctx: 64,
            max_resp: 24,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.model.validate()?;
        self.denoiser.validate()?;
        self.schedule.build()?;
        if self.denoiser.latent_dim != self.model.latent_dim
            || self.denoiser.hidden != self.model.hidden
        {
            return Err(PipelineError::Checkpoint(
                "denoiser dims must match the model (shared context states and latent)".into(),
            ));
        }
        if self.max_ctx + 1 > self.model.max_pos || self.max_resp + 1 > self.model.max_pos {
            return Err(PipelineError::Checkpoint(format!(
                "sequence budgets (ctx {}, resp {}) exceed position table {}",
                self.max_ctx, self.max_resp, self.model.max_pos
            )));
        }
        Ok(())
    }
}

/// Checkpoint metadata carried in the JSON block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: PipelineConfig,
    pub vocab_hash: String,
    pub step: usize,
    pub seed: u64,
    pub dev_loss: Option<f64>,
}

/// Model + denoiser + schedule. The denoiser exists only on the latent path;
/// the no-latent ablation carries none.
pub struct Pipeline<F: Scalar> {
    pub cfg: PipelineConfig,
    pub model: DialogueModel<F>,
    pub denoiser: Option<Denoiser<F>>,
    pub schedule: NoiseSchedule,
}

impl<F: Scalar> Pipeline<F> {
    pub fn new(cfg: PipelineConfig, seed: u64) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let model = DialogueModel::new(cfg.model.clone(), seed)?;
        let denoiser = if cfg.model.use_latent {
            Some(Denoiser::new(cfg.denoiser.clone(), seed.wrapping_add(1))?)
        } else {
            None
        };
        let schedule = cfg.schedule.build()?;
        Ok(Self {
            cfg,
            model,
            denoiser,
            schedule,
        })
    }

    pub fn use_latent(&self) -> bool {
        self.cfg.model.use_latent
    }

    /// All trainable parameters, model first, then the denoiser.
    pub fn named_params(&self) -> Vec<(String, Tensor<F>)> {
        let mut params = self.model.named_params();
        if let Some(d) = &self.denoiser {
            params.extend(d.named_params());
        }
        params
    }

    pub fn optimizer(&self, adamw: AdamWConfig) -> AdamW<F> {
        AdamW::new(self.named_params(), adamw)
    }

    /// Writes a checkpoint; pass the optimizer to make it resumable.
    pub fn save_checkpoint(
        &self,
        path: &Path,
        meta: &CheckpointMeta,
        opt: Option<&AdamW<F>>,
    ) -> Result<(), PipelineError> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let json = serde_json::to_vec(meta)
            .map_err(|e| PipelineError::Checkpoint(e.to_string()))?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let params = self.named_params();
        ParamStore::from_named(&params).write_to(&mut w)?;
        match opt {
            Some(opt) => {
                w.write_all(&[1])?;
                w.write_all(&opt.step_count().to_le_bytes())?;
                let moments = opt.export_moments();
                let named_m: Vec<(String, Tensor<F>)> = params
                    .iter()
                    .zip(&moments)
                    .map(|((p, t), (m, _))| {
                        (p.clone(), Tensor::from_vec(t.shape(), m.clone()).unwrap())
                    })
                    .collect();
                let named_v: Vec<(String, Tensor<F>)> = params
                    .iter()
                    .zip(&moments)
                    .map(|((p, t), (_, v))| {
                        (p.clone(), Tensor::from_vec(t.shape(), v.clone()).unwrap())
                    })
                    .collect();
                ParamStore::from_named(&named_m).write_to(&mut w)?;
                ParamStore::from_named(&named_v).write_to(&mut w)?;
            }
            None => w.write_all(&[0])?,
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a checkpoint saved with the same element type; restores the
    /// optimizer when the checkpoint carries one and `opt` is given.
    pub fn load_checkpoint(path: &Path) -> Result<(Self, CheckpointMeta), PipelineError> {
        let (meta, store, _) = read_checkpoint_file(path)?;
        let pipeline = Self::new(meta.config.clone(), 0)?;
        store.apply_to(&pipeline.named_params())?;
        Ok((pipeline, meta))
    }

    /// Loads a checkpoint plus optimizer state for exact resume.
    pub fn load_checkpoint_resumable(
        path: &Path,
        adamw: AdamWConfig,
    ) -> Result<(Self, CheckpointMeta, AdamW<F>), PipelineError> {
        let (meta, store, opt_state) = read_checkpoint_file(path)?;
        let pipeline = Self::new(meta.config.clone(), 0)?;
        store.apply_to(&pipeline.named_params())?;
        let mut opt = pipeline.optimizer(adamw);
        if let Some((step_count, m_store, v_store)) = opt_state {
            let params = pipeline.named_params();
            let mut moments = Vec::with_capacity(params.len());
            for (p, t) in &params {
                let find = |s: &ParamStore| -> Result<Vec<F>, PipelineError> {
                    let holder = Tensor::<F>::param(t.shape(), vec![F::zero(); t.numel()])?;
                    s.apply_to(&[(p.clone(), holder.clone())])?;
                    Ok(holder.data_clone())
                };
                moments.push((find(&m_store)?, find(&v_store)?));
            }
            opt.import_moments(moments, step_count)?;
        }
        Ok((pipeline, meta, opt))
    }
}

type OptSection = Option<(u64, ParamStore, ParamStore)>;

fn read_checkpoint_file(path: &Path) -> Result<(CheckpointMeta, ParamStore, OptSection), PipelineError> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(PipelineError::Checkpoint(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b)?;
    let version = u32::from_le_bytes(u32b);
    if version != CHECKPOINT_VERSION {
        return Err(PipelineError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u64b)?;
    let mut json = vec![0u8; u64::from_le_bytes(u64b) as usize];
    r.read_exact(&mut json)?;
    let meta: CheckpointMeta = serde_json::from_slice(&json)
        .map_err(|e| PipelineError::Checkpoint(format!("bad metadata: {e}")))?;
    let store = ParamStore::read_from(&mut r)?;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let opt = if flag[0] == 1 {
        r.read_exact(&mut u64b)?;
        let step_count = u64::from_le_bytes(u64b);
        let m = ParamStore::read_from(&mut r)?;
        let v = ParamStore::read_from(&mut r)?;
        Some((step_count, m, v))
    } else {
        None
    };
    Ok((meta, store, opt))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> PipelineConfig {
        let mut cfg = PipelineConfig::desk(64);
        cfg.model.hidden = 16;
        cfg.model.latent_dim = 16;
        cfg.model.heads = 2;
        cfg.model.ff_hidden = 32;
        cfg.model.enc_layers = 1;
        cfg.model.dec_layers = 1;
        cfg.model.max_pos = 32;
        cfg.denoiser = DenoiserConfig {
            layers: 1,
            hidden: 16,
            heads: 2,
            ff_hidden: 32,
            latent_dim: 16,
            time_dim: 8,
        };
        cfg.schedule.t_max = 20;
        cfg.max_ctx = 16;
        cfg.max_resp = 8;
        cfg
    }

    #[test]
    fn checkpoint_round_trip_restores_parameters_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let pipe = Pipeline::<f32>::new(tiny_config(), 7).unwrap();
        let meta = CheckpointMeta {
            config: pipe.cfg.clone(),
            vocab_hash: "abc".into(),
            step: 3,
            seed: 7,
            dev_loss: Some(1.25),
        };
        pipe.save_checkpoint(&path, &meta, None).unwrap();
        let (restored, meta2) = Pipeline::<f32>::load_checkpoint(&path).unwrap();
        assert_eq!(meta2.step, 3);
        assert_eq!(meta2.vocab_hash, "abc");
        assert_eq!(meta2.config, pipe.cfg);
        for ((n1, p1), (n2, p2)) in pipe.named_params().iter().zip(restored.named_params()) {
            assert_eq!(*n1, n2);
            let a: Vec<u32> = p1.data_clone().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = p2.data_clone().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "parameter {n1}");
        }
    }

    #[test]
    fn resumable_checkpoint_restores_optimizer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let pipe = Pipeline::<f32>::new(tiny_config(), 8).unwrap();
        let mut opt = pipe.optimizer(AdamWConfig::default());
        // one update so the moments are non-trivial
        let params = pipe.named_params();
        let loss = params[0].1.mul(&params[0].1).unwrap().sum_all();
        loss.backward().unwrap();
        opt.step(1e-3).unwrap();
        opt.zero_grads();
        let meta = CheckpointMeta {
            config: pipe.cfg.clone(),
            vocab_hash: "h".into(),
            step: 1,
            seed: 8,
            dev_loss: None,
        };
        pipe.save_checkpoint(&path, &meta, Some(&opt)).unwrap();
        let (_, _, opt2) =
            Pipeline::<f32>::load_checkpoint_resumable(&path, AdamWConfig::default()).unwrap();
        assert_eq!(opt2.step_count(), 1);
        for ((a, _), (b, _)) in opt
            .export_moments()
            .iter()
            .zip(opt2.export_moments().iter())
        {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn ablation_pipeline_has_no_denoiser() {
        let mut cfg = tiny_config();
        cfg.model.use_latent = false;
        let pipe = Pipeline::<f32>::new(cfg, 9).unwrap();
        assert!(pipe.denoiser.is_none());
        assert!(pipe
            .named_params()
            .iter()
            .all(|(n, _)| !n.starts_with("denoiser")));
    }

    #[test]
    fn mismatched_dims_rejected() {
        let mut cfg = tiny_config();
        cfg.denoiser.hidden = 32;
        assert!(Pipeline::<f32>::new(cfg, 0).is_err());
    }
}
