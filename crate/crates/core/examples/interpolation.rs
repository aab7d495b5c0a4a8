//! Frozen semantic embeddings and feature-space interpolation between real
//! and synthetic samples with soft labels.
//!
//! cargo run --release --example interpolation

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use synthdetect::augment::preprocess_input;
use synthdetect::semantic::{augment_batch_with_interpolation, embed_image, SemanticBackbone, SoftSample, ToyBackbone};
use synthdetect::toy::{toy_generator_autoencoder, toy_real_image, toy_synthetic_image, ToyCorpusConfig};

fn main() -> synthdetect::Result<()> {
    let backbone = ToyBackbone::default();
    println!("backbone {} ({} dims)", backbone.id(), backbone.dim());

    let gen = ToyCorpusConfig::default().generators[1].clone();
    let decoder = toy_generator_autoencoder(96, 0)?;
    let mut batch = Vec::new();
    for i in 0..8u64 {
        let (img, score) = if i % 2 == 0 {
            (toy_real_image(i, 96, 0.025)?, 0.0)
        } else {
            (toy_synthetic_image(i, 96, &gen, &decoder)?, 1.0)
        };
        let embedding = embed_image(&preprocess_input(&img)?, &backbone)?;
        batch.push(SoftSample { embedding, score });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = augment_batch_with_interpolation(&batch, 0.5, &mut rng)?;
    println!("replaced {:.0}% of the batch", 100.0 * out.replaced_fraction());
    for r in &out.replacements {
        println!(
            "  position {} <- real #{} / synthetic #{} at delta {:.3}",
            r.position, r.real, r.synth, r.delta
        );
    }
    let targets: Vec<String> = out.samples.iter().map(|s| format!("{:.2}", s.score)).collect();
    println!("targets: {}", targets.join(" "));
    Ok(())
}
