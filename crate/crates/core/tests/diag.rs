// temporary diagnostic - deleted before ship
use latentchat::corpus::{load_jsonl, BatchBuilder};
use latentchat::diffusion::q_sample;
use latentchat::model::{LatentKind, LatentState};
use latentchat::pipeline::Pipeline;
use latentchat::tensor::{no_grad, Tensor};
use latentchat::tokenizer::Vocab;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

#[test]
#[ignore]
fn diag_latent_geometry() {
    let (pipe, _) = Pipeline::<f32>::load_checkpoint(Path::new("/tmp/pilot/run3/checkpoint_best.bin")).unwrap();
    let vocab = Vocab::load(Path::new("/tmp/pilot/run3/vocab.txt")).unwrap();
    let samples = load_jsonl(Path::new("/tmp/pilot/corpus3.jsonl")).unwrap();
    let den = pipe.denoiser.as_ref().unwrap();

    no_grad(|| {
        // posterior latents for the first topic's 8 valid responses
        let oracle = latentchat::corpus::SyntheticOracle::load(Path::new(
            "/tmp/pilot/corpus3.oracle.jsonl",
        ))
        .unwrap();
        let ctx = samples[0].context.clone();
        let valid = oracle.valid_responses(&ctx).unwrap().to_vec();
        let probes: Vec<latentchat::corpus::DialogueSample> = valid
            .iter()
            .map(|r| latentchat::corpus::DialogueSample {
                context: ctx.clone(),
                response: r.clone(),
            })
            .collect();
        let (builder, _) = BatchBuilder::new(&probes, &vocab, 48, 24);
        let idx: Vec<usize> = (0..probes.len()).collect();
        let batch = builder.batch(&idx, 16).unwrap();
        let z0 = pipe.model.encode_posterior(&batch).unwrap();
        let d = 64usize;
        let zd = z0.z.data_clone();
        let norms: Vec<f32> = (0..probes.len())
            .map(|r| zd[r * d..(r + 1) * d].iter().map(|v| v * v).sum::<f32>().sqrt())
            .collect();
        println!("z0 norms: {norms:?}");
        let mut dists = Vec::new();
        for i in 0..probes.len() {
            for j in i + 1..probes.len() {
                let dist: f32 = (0..d)
                    .map(|k| (zd[i * d + k] - zd[j * d + k]).powi(2))
                    .sum::<f32>()
                    .sqrt();
                dists.push(dist);
            }
        }
        println!(
            "pairwise z0 distances: min {:.3} max {:.3} mean {:.3}",
            dists.iter().cloned().fold(f32::MAX, f32::min),
            dists.iter().cloned().fold(0.0, f32::max),
            dists.iter().sum::<f32>() / dists.len() as f32
        );

        // denoiser sensitivity: same context, same t, two different z_t
        let enc = pipe.model.encode_context(&batch).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in [1usize, 10, 50, 100, 150, 200] {
            let e1 = Tensor::<f32>::randn(&[probes.len(), d], 1.0, &mut rng);
            let e2 = Tensor::<f32>::randn(&[probes.len(), d], 1.0, &mut rng);
            let ts = vec![t; probes.len()];
            let z1 = q_sample(&z0, &ts, &e1, &pipe.schedule).unwrap();
            let z2 = q_sample(&z0, &ts, &e2, &pipe.schedule).unwrap();
            let o1 = den.denoise(&z1, &ts, &enc, &pipe.schedule).unwrap();
            let o2 = den.denoise(&z2, &ts, &enc, &pipe.schedule).unwrap();
            let d1 = o1.z.data_clone();
            let d2 = o2.z.data_clone();
            let out_dist: f32 = d1
                .iter()
                .zip(&d2)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f32>()
                .sqrt();
            // how far is the denoised output from the true z0, per row mean
            let err1: f32 = d1
                .iter()
                .zip(&zd)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f32>()
                .sqrt();
            println!(
                "t={t:3}  |out(e1)-out(e2)| = {out_dist:8.4}   |out-z0| = {err1:8.4}"
            );
        }

        // does the denoised output track the NOISE-ONLY direction at high t?
        let pure = LatentState {
            z: Tensor::<f32>::randn(&[probes.len(), d], 1.0, &mut rng),
            kind: LatentKind::Noised,
        };
        let o = den.denoise(&pure, &vec![200; probes.len()], &enc, &pipe.schedule).unwrap();
        let od = o.z.data_clone();
        let rows: Vec<f32> = (0..probes.len())
            .map(|r| od[r * d..(r + 1) * d].iter().map(|v| v * v).sum::<f32>().sqrt())
            .collect();
        println!("norms of denoise(pure noise, t=T): {rows:?}");
    });
}
