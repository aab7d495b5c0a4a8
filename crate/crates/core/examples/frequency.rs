//! Average residual spectra of real and synthetic images and the
//! high-frequency gap before and after JPEG compression.
//!
//! cargo run --release --example frequency [-- out_dir]

use std::path::PathBuf;

use synthdetect::freq::{mean_spectrum, spectrum_gap_report, write_matrix_png, SpectrumOptions};
use synthdetect::toy::{toy_generator_autoencoder, toy_real_image, toy_synthetic_image, ToyCorpusConfig};
use synthdetect::Image;

fn main() -> synthdetect::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(std::env::temp_dir);
    let size = 128;
    let gen = ToyCorpusConfig::default().generators[0].clone();
    let decoder = toy_generator_autoencoder(size, 0)?;
    let real: Vec<Image> = (0..24).map(|s| toy_real_image(s, size, 0.025)).collect::<Result<_, _>>()?;
    let synth: Vec<Image> = (100..124)
        .map(|s| toy_synthetic_image(s, size, &gen, &decoder))
        .collect::<Result<_, _>>()?;

    let opts = SpectrumOptions {
        size,
        ..Default::default()
    };
    let spectra = |imgs: &[Image], q: Option<u8>| {
        mean_spectrum(
            imgs.iter().map(move |i| match q {
                Some(q) => i.jpeg_roundtrip(q),
                None => Ok(i.clone()),
            }),
            &opts,
        )
    };
    let before = spectrum_gap_report(&spectra(&real, None)?, &spectra(&synth, None)?)?;
    let after = spectrum_gap_report(&spectra(&real, Some(75))?, &spectra(&synth, Some(75))?)?;
    println!("high-frequency gap: {:.4} raw, {:.4} after JPEG-75", before.gap, after.gap);

    write_matrix_png(&before.difference, &out.join("spectrum_diff.png"))?;
    write_matrix_png(&after.difference, &out.join("spectrum_diff_jpeg75.png"))?;
    println!("difference maps written to {}", out.display());
    Ok(())
}
