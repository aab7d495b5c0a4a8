//! Reconstruction residuals with three backends, the up/down-sampling
//! baseline and the trainable encoder on top.
//!
//! cargo run --release --example artifact_extraction

use synthdetect::artifact::{
    encode_artifact, extract_artifact, extract_updown_artifact, reconstruct, ArtifactEncoder, ArtifactEncoderConfig,
    IdentityBackend, PatchAutoencoder, ReconstructionBackend,
};
use synthdetect::toy::{toy_generator_autoencoder, toy_real_image, toy_synthetic_image, ToyCorpusConfig};

fn main() -> synthdetect::Result<()> {
    let size = 96;
    let real = toy_real_image(1, size, 0.025)?;
    let gen = ToyCorpusConfig::default().generators[0].clone();
    let decoder = toy_generator_autoencoder(size, 0)?;
    let synth = toy_synthetic_image(2, size, &gen, &decoder)?;

    // Fit the toy patch autoencoder on a handful of real images.
    let fit: Vec<_> = (10..26).map(|s| toy_real_image(s, size, 0.025)).collect::<Result<_, _>>()?;
    let ae = PatchAutoencoder::fit(&fit, 8, 16, 10_000, 0)?;

    let backends: [(&str, &dyn ReconstructionBackend); 2] = [("identity", &IdentityBackend), ("patch-ae", &ae)];
    for (name, backend) in backends {
        for (label, img) in [("real", &real), ("synthetic", &synth)] {
            let delta = extract_artifact(img, backend)?;
            println!("{name:<9} {label:<9} mean delta {:.5}", delta.delta().mean());
        }
    }
    let recon = reconstruct(&real, &ae)?;
    println!("reconstruction shape {:?}", recon.shape());

    for (label, img) in [("real", &real), ("synthetic", &synth)] {
        let d = extract_updown_artifact(img)?;
        println!("up/down   {label:<9} mean delta {:.5}", d.delta().mean());
    }

    let encoder = ArtifactEncoder::new(ArtifactEncoderConfig::default(), 0);
    let v_art = encode_artifact(&extract_artifact(&synth, &ae)?, &encoder)?;
    println!("v_art has {} dims, first three {:?}", v_art.len(), &v_art[..3]);
    Ok(())
}
