//! Desk-scale toy corpus.
//!
//! Real images are multi-octave filtered noise with a random color mixing
//! and per-pixel sensor grain. Synthetic images start from smoother, more
//! saturated noise fields, pass through a low-rank patch autoencoder at half
//! resolution and are upsampled 2x with a faint checkerboard, mimicking the
//! decoder and transposed-convolution traces of latent generators.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{reconstruct, PatchAutoencoder};
use crate::error::{Error, Result};
use crate::manifest::{GenerationConfig, LabelRule, LabelingRule, LABEL_REAL, LABEL_SYNTHETIC, SIDECAR_SUFFIX};
use crate::raster::Image;
use crate::training::derive_seed;

/// How a synthetic image is brought back to full resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsampling {
    Nearest,
    Bilinear,
}

/// One toy generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyGenerator {
    pub name: String,
    pub upsampling: Upsampling,
    /// Amplitude of the injected `(-1)^(x+y)` pattern.
    pub checkerboard: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyCorpusConfig {
    pub n_real: usize,
    pub n_synthetic: usize,
    pub size: usize,
    pub seed: u64,
    /// Synthetic images are split evenly across these.
    pub generators: Vec<ToyGenerator>,
    /// Std of the per-pixel grain on real images.
    pub grain: f32,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            n_real: 2000,
            n_synthetic: 2000,
            size: 224,
            seed: 0,
            generators: vec![
                ToyGenerator {
                    name: "toy-gen-a".into(),
                    upsampling: Upsampling::Nearest,
                    checkerboard: 0.02,
                },
                ToyGenerator {
                    name: "toy-gen-b".into(),
                    upsampling: Upsampling::Bilinear,
                    checkerboard: 0.015,
                },
            ],
            grain: 0.025,
        }
    }
}

/// Parameters of the smooth noise field behind an image.
#[derive(Debug, Clone, Copy)]
struct FieldStyle {
    /// Octave amplitudes fall off as `cells^-slope`.
    slope: f64,
    saturation: f32,
    contrast: f32,
}

const REAL_STYLE: FieldStyle = FieldStyle {
    slope: 0.9,
    saturation: 1.0,
    contrast: 1.0,
};

const SYNTH_STYLE: FieldStyle = FieldStyle {
    slope: 1.15,
    saturation: 1.3,
    contrast: 1.1,
};

fn noise_field(rng: &mut ChaCha8Rng, size: usize, style: FieldStyle) -> Result<Image> {
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    let mut acc = Image::filled(size, size, 3, 0.0)?;
    let mut cells = 4;
    while cells <= size / 2 {
        let amp = (cells as f64).powf(-style.slope) as f32;
        let grid = Image::from_fn(cells, cells, 3, |_, _, _| normal.sample(rng))?;
        let up = grid.resize_bilinear(size, size)?;
        for (a, u) in acc.data_mut().iter_mut().zip(up.data()) {
            *a += amp * u;
        }
        cells *= 2;
    }
    // Normalize, then mix channels with a random palette.
    let n = acc.data().len() as f64;
    let mean = acc.mean();
    let std = (acc.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-6);
    let base: [f32; 3] = [rng.gen_range(0.3..0.65), rng.gen_range(0.3..0.65), rng.gen_range(0.3..0.65)];
    let mut mix = [[0.0f32; 3]; 3];
    for (i, row) in mix.iter_mut().enumerate() {
        for (j, m) in row.iter_mut().enumerate() {
            *m = if i == j { 0.6 } else { 0.0 } + rng.gen_range(-0.25..0.25);
        }
    }
    let scale = 0.16 * style.contrast / std as f32;
    let mut out = acc;
    for px in out.data_mut().chunks_exact_mut(3) {
        let z = [(px[0] - mean as f32) * scale, (px[1] - mean as f32) * scale, (px[2] - mean as f32) * scale];
        let mut v = [0.0f32; 3];
        for c in 0..3 {
            v[c] = base[c] + mix[c][0] * z[0] + mix[c][1] * z[1] + mix[c][2] * z[2];
        }
        let g = 0.299 * v[0] + 0.587 * v[1] + 0.114 * v[2];
        for c in 0..3 {
            px[c] = g + style.saturation * (v[c] - g);
        }
    }
    Ok(out.clamp01())
}

/// A toy "photograph": filtered noise plus sensor grain.
pub fn toy_real_image(seed: u64, size: usize, grain: f32) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = noise_field(&mut rng, size, REAL_STYLE)?;
    if grain > 0.0 {
        let normal = Normal::new(0.0f32, grain).unwrap();
        for v in img.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(img.clamp01())
}

fn downsample2(x: &Image) -> Result<Image> {
    Image::from_fn(x.width() / 2, x.height() / 2, x.channels(), |px, py, c| {
        (x.get(2 * px, 2 * py, c) + x.get(2 * px + 1, 2 * py, c) + x.get(2 * px, 2 * py + 1, c) + x.get(2 * px + 1, 2 * py + 1, c))
            / 4.0
    })
}

fn upsample2(x: &Image, mode: Upsampling) -> Result<Image> {
    match mode {
        Upsampling::Nearest => Image::from_fn(x.width() * 2, x.height() * 2, x.channels(), |px, py, c| x.get(px / 2, py / 2, c)),
        Upsampling::Bilinear => x.resize_bilinear(x.width() * 2, x.height() * 2),
    }
}

/// Fits the shared half-resolution decoder of the toy generators.
pub fn toy_generator_autoencoder(size: usize, seed: u64) -> Result<PatchAutoencoder> {
    let half = size / 2;
    let images = (0..24)
        .map(|i| noise_field(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0xAE, i])), half, SYNTH_STYLE))
        .collect::<Result<Vec<_>>>()?;
    PatchAutoencoder::fit(&images, 4, 10, 20_000, seed)
}

/// A toy generator sample: smooth field, low-rank decode at half
/// resolution, 2x upsampling and a checkerboard trace.
pub fn toy_synthetic_image(seed: u64, size: usize, generator: &ToyGenerator, decoder: &PatchAutoencoder) -> Result<Image> {
    if size < 8 || size % 2 != 0 {
        return Err(Error::Config(format!("toy image size {size} must be even and >= 8")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field = noise_field(&mut rng, size, SYNTH_STYLE)?;
    let decoded = reconstruct(&downsample2(&field)?, decoder)?;
    let mut img = upsample2(&decoded, generator.upsampling)?;
    let a = generator.checkerboard;
    let w = img.width();
    for (i, px) in img.data_mut().chunks_exact_mut(3).enumerate() {
        let (x, y) = (i % w, i / w);
        let s = if (x + y) % 2 == 0 { a } else { -a };
        px.iter_mut().for_each(|v| *v += s);
    }
    Ok(img.clamp01())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyCorpus {
    pub root: PathBuf,
    pub rule: LabelingRule,
    pub written: usize,
}

#[derive(Serialize)]
struct SidecarOut<'a> {
    #[serde(flatten)]
    generation: &'a GenerationConfig,
    caption_dataset: &'a str,
}

/// Writes `real/` and one directory per generator under `root`, with a
/// generation sidecar per synthetic image. Returns the labeling rule for
/// [`crate::manifest::build_manifest`].
pub fn generate_toy_corpus(root: &Path, cfg: &ToyCorpusConfig) -> Result<ToyCorpus> {
    if cfg.generators.is_empty() && cfg.n_synthetic > 0 {
        return Err(Error::Config("toy corpus needs at least one generator".into()));
    }
    let mkdir = |d: &Path| fs::create_dir_all(d).map_err(|e| Error::io(format!("creating {}", d.display()), e));
    let mut rule = LabelingRule::new();
    mkdir(&root.join("real"))?;
    rule.insert(
        "real".into(),
        LabelRule {
            label: LABEL_REAL,
            source: "toy-photos".into(),
        },
    );
    for g in &cfg.generators {
        mkdir(&root.join(&g.name))?;
        rule.insert(
            g.name.clone(),
            LabelRule {
                label: LABEL_SYNTHETIC,
                source: g.name.clone(),
            },
        );
    }

    (0..cfg.n_real).into_par_iter().try_for_each(|i| {
        let img = toy_real_image(derive_seed(&[cfg.seed, 1, i as u64]), cfg.size, cfg.grain)?;
        img.save(&root.join("real").join(format!("{i:05}.png")))
    })?;

    let decoder = toy_generator_autoencoder(cfg.size, derive_seed(&[cfg.seed, 3]))?;
    (0..cfg.n_synthetic).into_par_iter().try_for_each(|i| {
        let g = &cfg.generators[i % cfg.generators.len()];
        let seed = derive_seed(&[cfg.seed, 2, i as u64]);
        let img = toy_synthetic_image(seed, cfg.size, g, &decoder)?;
        let dir = root.join(&g.name);
        img.save(&dir.join(format!("{i:05}.png")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51DE);
        let generation = GenerationConfig {
            model_name: g.name.clone(),
            steps: rng.gen_range(10..=50),
            guidance: (rng.gen_range(3.0..=7.0f64) * 10.0).round() / 10.0,
            jpeg_quality: None,
        };
        let sidecar = SidecarOut {
            generation: &generation,
            caption_dataset: "toy-captions",
        };
        let path = dir.join(format!("{i:05}{SIDECAR_SUFFIX}"));
        fs::write(&path, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    })?;

    Ok(ToyCorpus {
        root: root.to_path_buf(),
        rule,
        written: cfg.n_real + cfg.n_synthetic,
    })
}
