//! Shared fixtures for the criterion benchmarks: a small untrained pipeline
//! over the synthetic corpus. Raw speed is what matters here, not quality.

use latentchat::corpus::{generate_synthetic, DialogueSample, Turn};
use latentchat::diffusion::DenoiserConfig;
use latentchat::pipeline::{Pipeline, PipelineConfig};
use latentchat::tokenizer::{Vocab, BASE_VOCAB};

pub struct BenchFixture {
    pub pipeline: Pipeline<f32>,
    pub vocab: Vocab,
    pub contexts: Vec<Vec<Turn>>,
}

pub fn fixture() -> BenchFixture {
    let (samples, _) = generate_synthetic(11, 40, 6).expect("synthetic corpus");
    let lines: Vec<String> = samples
        .iter()
        .flat_map(|s: &DialogueSample| {
            s.context
                .iter()
                .map(|t| t.text.clone())
                .chain(std::iter::once(s.response.clone()))
        })
        .collect();
    let vocab = Vocab::train_bpe(&lines, BASE_VOCAB + 200).expect("vocab");

    let mut cfg = PipelineConfig::desk(vocab.size() as usize);
    cfg.model.hidden = 64;
    cfg.model.latent_dim = 64;
    cfg.model.ff_hidden = 128;
    cfg.denoiser = DenoiserConfig {
        layers: 2,
        hidden: 64,
        heads: 4,
        ff_hidden: 128,
        latent_dim: 64,
        time_dim: 128,
    };
    cfg.schedule.t_max = 200;
    let pipeline = Pipeline::new(cfg, 17).expect("pipeline");
    let contexts = samples.into_iter().map(|s| s.context).collect();
    BenchFixture {
        pipeline,
        vocab,
        contexts,
    }
}
