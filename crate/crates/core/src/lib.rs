//! Latent-diffusion dialogue generation, built from scratch.
//!
//! The crate is organised around the data flow of the generator:
//!
//! - [`tensor`]: dense tensors with reverse-mode autodiff and an AdamW step;
//! - [`tokenizer`]: a byte-level BPE tokenizer with reserved special tokens;
//! - [`corpus`]: dialogue samples, batch assembly and a synthetic
//!   one-to-many corpus with an exact validity oracle;
//! - [`model`]: the encoder-decoder transformer, the response-latent
//!   posterior head and the memory-scheme latent injection;
//! - [`diffusion`]: the sqrt noise schedule, forward corruption, the latent
//!   denoiser and the step-skipping sampler;
//! - [`training`]: the joint NLL + BOW + latent-denoising objective,
//!   warmup schedule, checkpointing and resume;
//! - [`metrics`]: BLEU-1/2, Distinct-1/2 and oracle-based validity scores;
//! - [`generate`]: inference drivers (sample-n-candidates, evaluation runs).

pub mod corpus;
pub mod diffusion;
pub mod generate;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod text;
pub mod tokenizer;
pub mod training;


pub use pipeline::Pipeline;
pub use tensor::{Scalar, Tensor, TensorError};
