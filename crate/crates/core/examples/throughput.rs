//! Times training steps and guided sampling at the default model size.
//!
//! cargo run --release --example throughput -- [batch] [steps] [c1,c2,c3]

use std::time::Instant;

use shapefree::dataset::pipeline::run_pipeline;
use shapefree::dataset::DatasetConfig;
use shapefree::diffusion::Vocabulary;
use shapefree::sampler::{sample_batch, GuidanceConfig, SampleRequest};
use shapefree::train::{EncodedDataset, TrainConfig, Trainer};

fn main() -> shapefree::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let int = |i: usize, d: usize| args.get(i).map_or(d, |a| a.parse().expect("integer argument"));
    let batch = int(0, 32);
    let steps = int(1, 5);
    let mut model = shapefree::diffusion::ModelConfig::default();
    if let Some(c) = args.get(2) {
        model.denoiser.channels = c.split(',').map(|v| v.parse().expect("channel width")).collect();
    }
    let (tuples, _) = run_pipeline(&DatasetConfig::synthetic(40, 0))?;
    let cfg = TrainConfig {
        batch_size: batch,
        model,
        ..Default::default()
    };
    let data = EncodedDataset::encode(&tuples, &Vocabulary::categories(), cfg.model.image_size as u32)?;
    let mut trainer = Trainer::new(cfg, data, None)?;
    println!("parameters: {}", trainer.state.model.parameter_count());
    trainer.step()?;
    let t = Instant::now();
    for _ in 0..steps {
        trainer.step()?;
    }
    println!("train step (batch {batch}): {:.3}s", t.elapsed().as_secs_f64() / steps as f64);

    let gcfg = GuidanceConfig {
        steps: 10,
        ..Default::default()
    };
    let reqs: Vec<SampleRequest> = tuples
        .iter()
        .take(8)
        .enumerate()
        .map(|(i, tu)| SampleRequest {
            image: &tu.input_image,
            caption: &tu.caption,
            seed: i as u64,
        })
        .collect();
    let t = Instant::now();
    sample_batch(&trainer.state.model, &reqs, &gcfg)?;
    println!(
        "sampling: {:.4}s per image per step (batch {})",
        t.elapsed().as_secs_f64() / 10.0 / reqs.len() as f64,
        reqs.len()
    );
    Ok(())
}
