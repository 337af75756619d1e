//! Transformer layers (post-norm residual blocks, BART-style).

use rand::Rng;

use crate::tensor::{Scalar, Tensor, TensorError};

use super::attention::{Attention, AttnMask, FeedForward, LayerNorm};

#[derive(Debug)]
pub struct EncoderLayer<F: Scalar> {
    pub self_attn: Attention<F>,
    pub norm_attn: LayerNorm<F>,
    pub ff: FeedForward<F>,
    pub norm_ff: LayerNorm<F>,
}

impl<F: Scalar> EncoderLayer<F> {
    pub fn new(dim: usize, heads: usize, ff_hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            self_attn: Attention::new(dim, heads, rng),
            norm_attn: LayerNorm::new(dim),
            ff: FeedForward::new(dim, ff_hidden, rng),
            norm_ff: LayerNorm::new(dim),
        }
    }

    pub fn forward(&self, x: &Tensor<F>, mask: &AttnMask) -> Result<Tensor<F>, TensorError> {
        let attended = self.self_attn.forward(x, x, None, mask)?;
        let x = self.norm_attn.forward(&x.add(&attended)?)?;
        let ff = self.ff.forward(&x)?;
        self.norm_ff.forward(&x.add(&ff)?)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        self.self_attn.visit(&format!("{prefix}.self_attn"), f);
        self.norm_attn.visit(&format!("{prefix}.norm_attn"), f);
        self.ff.visit(&format!("{prefix}.ff"), f);
        self.norm_ff.visit(&format!("{prefix}.norm_ff"), f);
    }
}

/// Decoder layer: causal self-attention (optionally with a prepended
/// length-1 latent memory slot), cross-attention over the encoder state,
/// then the feed-forward block. Also used by the latent denoiser, which
/// passes no memory.
#[derive(Debug)]
pub struct DecoderLayer<F: Scalar> {
    pub self_attn: Attention<F>,
    pub norm_self: LayerNorm<F>,
    pub cross_attn: Attention<F>,
    pub norm_cross: LayerNorm<F>,
    pub ff: FeedForward<F>,
    pub norm_ff: LayerNorm<F>,
}

impl<F: Scalar> DecoderLayer<F> {
    pub fn new(dim: usize, heads: usize, ff_hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            self_attn: Attention::new(dim, heads, rng),
            norm_self: LayerNorm::new(dim),
            cross_attn: Attention::new(dim, heads, rng),
            norm_cross: LayerNorm::new(dim),
            ff: FeedForward::new(dim, ff_hidden, rng),
            norm_ff: LayerNorm::new(dim),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        x: &Tensor<F>,
        memory: Option<(&Tensor<F>, &Tensor<F>)>,
        self_mask: &AttnMask,
        enc_state: &Tensor<F>,
        cross_mask: &AttnMask,
    ) -> Result<Tensor<F>, TensorError> {
        let attended = self.self_attn.forward(x, x, memory, self_mask)?;
        let x = self.norm_self.forward(&x.add(&attended)?)?;
        let crossed = self.cross_attn.forward(&x, enc_state, None, cross_mask)?;
        let x = self.norm_cross.forward(&x.add(&crossed)?)?;
        let ff = self.ff.forward(&x)?;
        self.norm_ff.forward(&x.add(&ff)?)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        self.self_attn.visit(&format!("{prefix}.self_attn"), f);
        self.norm_self.visit(&format!("{prefix}.norm_self"), f);
        self.cross_attn.visit(&format!("{prefix}.cross_attn"), f);
        self.norm_cross.visit(&format!("{prefix}.norm_cross"), f);
        self.ff.visit(&format!("{prefix}.ff"), f);
        self.norm_ff.visit(&format!("{prefix}.norm_ff"), f);
    }
}
