//! Multi-head attention and the small parameter bundles (linear, layer
//! norm, feed-forward) shared by the encoder, decoder and latent denoiser.

use rand::Rng;

use crate::tensor::{concat, Scalar, Tensor, TensorError};

/// Xavier-uniform weights, sampled in f64 for dtype-independent streams.
pub fn xavier<F: Scalar>(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<F> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data: Vec<F> = (0..fan_in * fan_out)
        .map(|_| F::from_f64(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::param(&[fan_in, fan_out], data).expect("xavier shape")
}

/// Affine map `x · W + b` with `W` of shape `[in, out]`.
#[derive(Debug)]
pub struct Linear<F: Scalar> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: xavier(fan_in, fan_out, rng),
            bias: Tensor::param(&[fan_out], vec![F::zero(); fan_out]).unwrap(),
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        x.matmul(&self.weight)?.add(&self.bias)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }
}

#[derive(Debug)]
pub struct LayerNorm<F: Scalar> {
    pub gain: Tensor<F>,
    pub bias: Tensor<F>,
    pub eps: f64,
}

impl<F: Scalar> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: Tensor::param(&[dim], vec![F::one(); dim]).unwrap(),
            bias: Tensor::param(&[dim], vec![F::zero(); dim]).unwrap(),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        x.layer_norm(&self.gain, &self.bias, self.eps)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        f(format!("{prefix}.gain"), &self.gain);
        f(format!("{prefix}.bias"), &self.bias);
    }
}

#[derive(Debug)]
pub struct FeedForward<F: Scalar> {
    pub inner: Linear<F>,
    pub outer: Linear<F>,
}

impl<F: Scalar> FeedForward<F> {
    pub fn new(dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            inner: Linear::new(dim, hidden, rng),
            outer: Linear::new(hidden, dim, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        self.outer.forward(&self.inner.forward(x)?.gelu())
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        self.inner.visit(&format!("{prefix}.inner"), f);
        self.outer.visit(&format!("{prefix}.outer"), f);
    }
}

/// Per-(query, key) attendability for one batch; expanded across heads when
/// the scores are masked.
#[derive(Debug, Clone)]
pub struct AttnMask {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    /// Every query may attend to exactly the unmasked key positions.
    pub fn padding(key_mask: &[bool], batch: usize, q_len: usize) -> Self {
        let k_len = key_mask.len() / batch;
        let mut allowed = vec![false; batch * q_len * k_len];
        for b in 0..batch {
            for q in 0..q_len {
                let base = (b * q_len + q) * k_len;
                allowed[base..base + k_len]
                    .copy_from_slice(&key_mask[b * k_len..(b + 1) * k_len]);
            }
        }
        Self {
            batch,
            q_len,
            k_len,
            allowed,
        }
    }

    /// Causal self-attention over `q_len` positions, with `mem` always-visible
    /// slots prepended to the keys. Padded query positions (per `q_mask`)
    /// still see themselves so their rows stay well-defined.
    pub fn causal_with_memory(q_mask: &[bool], batch: usize, q_len: usize, mem: usize) -> Self {
        let k_len = mem + q_len;
        let mut allowed = vec![false; batch * q_len * k_len];
        for b in 0..batch {
            for q in 0..q_len {
                let base = (b * q_len + q) * k_len;
                for m in 0..mem {
                    allowed[base + m] = true;
                }
                for k in 0..=q {
                    allowed[base + mem + k] = q_mask[b * q_len + k] || k == q;
                }
            }
        }
        Self {
            batch,
            q_len,
            k_len,
            allowed,
        }
    }

    /// Forbids one (query, key) pair. Test hook for memory-ablation checks.
    pub fn ban_key(&mut self, batch: usize, q: usize, k: usize) {
        self.allowed[(batch * self.q_len + q) * self.k_len + k] = false;
    }

    fn expand_heads(&self, heads: usize) -> Vec<bool> {
        let per_batch = self.q_len * self.k_len;
        let mut out = vec![false; self.batch * heads * per_batch];
        for b in 0..self.batch {
            let src = &self.allowed[b * per_batch..(b + 1) * per_batch];
            for h in 0..heads {
                let dst = (b * heads + h) * per_batch;
                out[dst..dst + per_batch].copy_from_slice(src);
            }
        }
        out
    }
}

#[derive(Debug)]
pub struct Attention<F: Scalar> {
    pub query: Linear<F>,
    pub key: Linear<F>,
    pub value: Linear<F>,
    pub output: Linear<F>,
    pub heads: usize,
}

impl<F: Scalar> Attention<F> {
    pub fn new(dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(dim % heads == 0, "hidden size must divide into heads");
        Self {
            query: Linear::new(dim, dim, rng),
            key: Linear::new(dim, dim, rng),
            value: Linear::new(dim, dim, rng),
            output: Linear::new(dim, dim, rng),
            heads,
        }
    }

    /// Multi-head attention of `q_src` over `kv_src`, with optional memory
    /// slots prepended to the key/value source (the latent injection path).
    pub fn forward(
        &self,
        q_src: &Tensor<F>,
        kv_src: &Tensor<F>,
        memory: Option<(&Tensor<F>, &Tensor<F>)>,
        mask: &AttnMask,
    ) -> Result<Tensor<F>, TensorError> {
        let (b, lq, d) = dims3(q_src)?;
        let h = self.heads;
        let dh = d / h;

        let (k_input, v_input) = match memory {
            Some((mk, mv)) => (
                concat(&[mk.clone(), kv_src.clone()], 1)?,
                concat(&[mv.clone(), kv_src.clone()], 1)?,
            ),
            None => (kv_src.clone(), kv_src.clone()),
        };
        let lk = k_input.shape()[1];
        debug_assert_eq!(mask.q_len, lq);
        debug_assert_eq!(mask.k_len, lk);

        let split = |t: &Tensor<F>, len: usize| -> Result<Tensor<F>, TensorError> {
            // [B, L, d] -> [B*H, L, dh]
            t.reshape(&[b, len, h, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[b * h, len, dh])
        };
        let q = split(&self.query.forward(q_src)?, lq)?;
        let k = split(&self.key.forward(&k_input)?, lk)?;
        let v = split(&self.value.forward(&v_input)?, lk)?;

        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let scores = q.matmul(&k.transpose_last2()?)?.mul_scalar(scale);
        let weights = scores.masked_softmax(&mask.expand_heads(h))?;
        let mixed = weights.matmul(&v)?; // [B*H, Lq, dh]
        let merged = mixed
            .reshape(&[b, h, lq, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, lq, d])?;
        self.output.forward(&merged)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        self.query.visit(&format!("{prefix}.query"), f);
        self.key.visit(&format!("{prefix}.key"), f);
        self.value.visit(&format!("{prefix}.value"), f);
        self.output.visit(&format!("{prefix}.output"), f);
    }
}

pub fn dims3<F: Scalar>(t: &Tensor<F>) -> Result<(usize, usize, usize), TensorError> {
    match t.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        other => Err(TensorError::Contract(format!(
            "expected rank-3 tensor, got {other:?}"
        ))),
    }
}
