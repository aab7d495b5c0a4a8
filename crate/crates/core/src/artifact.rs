//! Reconstruction-residual artifact features.
//!
//! An image is encoded to a latent mean and spread, decoded from the mean
//! alone, and the artifact map is the elementwise absolute residual
//! `|x' - x|`. A small trainable residual CNN turns that map into `v_art`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array1, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{relu_backward, relu_inplace, Conv2d, ConvGrads, ConvState, Moments, Adam};
use crate::raster::Image;
use crate::weights::{checksum_f32, F32Blob};

/// Latent code returned by [`ReconstructionBackend::encode`].
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub mu: Vec<f32>,
    /// Per-coordinate spread; produced for completeness, never used to
    /// reconstruct.
    pub sigma: Vec<f32>,
    /// `(height, width, channels)` of the encoded image.
    pub image_shape: (usize, usize, usize),
}

/// Encoder/decoder pair used to reconstruct an image.
pub trait ReconstructionBackend: Send + Sync {
    fn id(&self) -> String;
    fn encode(&self, x: &Image) -> Result<Latent>;
    /// Decodes a latent mean for an image of `image_shape`.
    fn decode(&self, mu: &[f32], image_shape: (usize, usize, usize)) -> Result<Image>;
}

/// `x' = decode(encode(x).mu)`, clamped to `[0, 1]`. No sampling noise.
pub fn reconstruct(x: &Image, backend: &dyn ReconstructionBackend) -> Result<Image> {
    let latent = backend.encode(x)?;
    let out = backend.decode(&latent.mu, latent.image_shape)?;
    if !out.same_shape(x) {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", x.shape()),
            got: format!("{:?}", out.shape()),
        });
    }
    Ok(out.clamp01())
}

/// Per-pixel absolute reconstruction residual.
#[derive(Debug, Clone, PartialEq)]
pub struct ArtifactMap {
    delta: Image,
}

impl ArtifactMap {
    /// Wraps a residual image; rejects negative entries.
    pub fn new(delta: Image) -> Result<Self> {
        if delta.data().iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidImage("artifact map must be non-negative".into()));
        }
        Ok(Self { delta })
    }

    pub fn delta(&self) -> &Image {
        &self.delta
    }

    pub fn into_image(self) -> Image {
        self.delta
    }

    pub fn is_zero(&self) -> bool {
        self.delta.data().iter().all(|&v| v == 0.0)
    }
}

pub fn extract_artifact(x: &Image, backend: &dyn ReconstructionBackend) -> Result<ArtifactMap> {
    let recon = reconstruct(x, backend)?;
    Ok(ArtifactMap { delta: recon.abs_diff(x)? })
}

/// Residual of a bilinear halve-then-double round trip.
pub fn extract_updown_artifact(x: &Image) -> Result<ArtifactMap> {
    if x.width() < 2 || x.height() < 2 {
        return Err(Error::InvalidImage(format!(
            "up/down artifact needs edges >= 2, got {}x{}",
            x.width(),
            x.height()
        )));
    }
    let down = x.resize_bilinear(x.width() / 2, x.height() / 2)?;
    let up = down.resize_bilinear(x.width(), x.height())?;
    Ok(ArtifactMap { delta: up.abs_diff(x)? })
}

// ---------------------------------------------------------------------------
// Backends

/// `decode(encode(x)) = x`.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityBackend;

impl ReconstructionBackend for IdentityBackend {
    fn id(&self) -> String {
        "identity".into()
    }

    fn encode(&self, x: &Image) -> Result<Latent> {
        Ok(Latent {
            mu: x.data().to_vec(),
            sigma: vec![0.0; x.data().len()],
            image_shape: x.shape(),
        })
    }

    fn decode(&self, mu: &[f32], (h, w, c): (usize, usize, usize)) -> Result<Image> {
        Image::new(w, h, c, mu.to_vec())
    }
}

/// Identity encoder whose decoder adds a constant offset.
#[derive(Debug, Clone, Copy)]
pub struct ShiftBackend(pub f32);

impl ReconstructionBackend for ShiftBackend {
    fn id(&self) -> String {
        format!("shift({})", self.0)
    }

    fn encode(&self, x: &Image) -> Result<Latent> {
        IdentityBackend.encode(x)
    }

    fn decode(&self, mu: &[f32], (h, w, c): (usize, usize, usize)) -> Result<Image> {
        Image::new(w, h, c, mu.iter().map(|v| v + self.0).collect())
    }
}

/// Affine encoder/decoder on the flattened image:
/// `mu = E x + e`, `x' = D mu + d`.
#[derive(Debug, Clone)]
pub struct LinearBackend {
    pub image_shape: (usize, usize, usize),
    pub encoder: DMatrix<f32>,
    pub encoder_bias: DVector<f32>,
    pub decoder: DMatrix<f32>,
    pub decoder_bias: DVector<f32>,
}

impl LinearBackend {
    pub fn new(image_shape: (usize, usize, usize), encoder: DMatrix<f32>, decoder: DMatrix<f32>) -> Result<Self> {
        let n = image_shape.0 * image_shape.1 * image_shape.2;
        if encoder.ncols() != n || decoder.nrows() != n || decoder.ncols() != encoder.nrows() {
            return Err(Error::ShapeMismatch {
                expected: format!("encoder k x {n}, decoder {n} x k"),
                got: format!(
                    "encoder {}x{}, decoder {}x{}",
                    encoder.nrows(),
                    encoder.ncols(),
                    decoder.nrows(),
                    decoder.ncols()
                ),
            });
        }
        let k = encoder.nrows();
        Ok(Self {
            image_shape,
            encoder,
            encoder_bias: DVector::zeros(k),
            decoder,
            decoder_bias: DVector::zeros(n),
        })
    }
}

impl ReconstructionBackend for LinearBackend {
    fn id(&self) -> String {
        format!("linear{:?}", self.image_shape)
    }

    fn encode(&self, x: &Image) -> Result<Latent> {
        if x.shape() != self.image_shape {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.image_shape),
                got: format!("{:?}", x.shape()),
            });
        }
        let mu = &self.encoder * DVector::from_column_slice(x.data()) + &self.encoder_bias;
        Ok(Latent {
            sigma: vec![0.0; mu.len()],
            mu: mu.as_slice().to_vec(),
            image_shape: x.shape(),
        })
    }

    fn decode(&self, mu: &[f32], shape: (usize, usize, usize)) -> Result<Image> {
        if shape != self.image_shape || mu.len() != self.encoder.nrows() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?} / {} latents", self.image_shape, self.encoder.nrows()),
                got: format!("{:?} / {} latents", shape, mu.len()),
            });
        }
        let x = &self.decoder * DVector::from_column_slice(mu) + &self.decoder_bias;
        Image::new(shape.1, shape.0, shape.2, x.as_slice().to_vec())
    }
}

/// Toy convolutional autoencoder: a `patch x patch` stride-`patch`
/// convolution into `latent` channels and the matching transposed
/// convolution back. Weights are fitted in closed form (principal patch
/// subspace), which is the optimum for this linear architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchAutoencoder {
    pub patch: usize,
    pub latent: usize,
    /// Mean patch, length `patch * patch * 3`.
    pub mean: Vec<f32>,
    /// Row-major `(latent, patch * patch * 3)` orthonormal components.
    pub components: Vec<f32>,
    /// Per-latent spread reported as `sigma`.
    pub spread: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PatchAutoencoderFile {
    format: String,
    version: u32,
    patch: usize,
    latent: usize,
    mean: F32Blob,
    components: F32Blob,
    spread: F32Blob,
}

const BACKEND_FORMAT: &str = "synthdetect-patch-autoencoder";
const BACKEND_VERSION: u32 = 1;

impl PatchAutoencoder {
    fn dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    /// Fits on up to `max_patches` randomly chosen patches from `images`.
    pub fn fit(images: &[Image], patch: usize, latent: usize, max_patches: usize, seed: u64) -> Result<Self> {
        let d = patch * patch * 3;
        if latent == 0 || latent > d {
            return Err(Error::Config(format!("latent size {latent} must be in 1..={d}")));
        }
        let mut coords = Vec::new();
        for (i, img) in images.iter().enumerate() {
            if img.channels() != 3 {
                return Err(Error::ShapeMismatch {
                    expected: "3 channels".into(),
                    got: format!("{}", img.channels()),
                });
            }
            for py in 0..img.height() / patch {
                for px in 0..img.width() / patch {
                    coords.push((i, px, py));
                }
            }
        }
        if coords.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        coords.shuffle(&mut rng);
        coords.truncate(max_patches.max(latent + 1));

        let mut buf = vec![0.0f32; d];
        let mut mean = vec![0.0f64; d];
        let mut rows = Vec::with_capacity(coords.len());
        for &(i, px, py) in &coords {
            read_patch(&images[i], px, py, patch, &mut buf);
            for (m, &v) in mean.iter_mut().zip(&buf) {
                *m += v as f64;
            }
            rows.push(buf.clone());
        }
        let n = rows.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        let mut cov = DMatrix::<f64>::zeros(d, d);
        let mut centered = DVector::<f64>::zeros(d);
        for row in &rows {
            for j in 0..d {
                centered[j] = row[j] as f64 - mean[j];
            }
            cov.ger(1.0 / n, &centered, &centered, 1.0);
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut components = Vec::with_capacity(latent * d);
        let mut spread = Vec::with_capacity(latent);
        for &k in order.iter().take(latent) {
            let col = eig.eigenvectors.column(k);
            // Fix the sign so fits are reproducible across eigen solvers.
            let sign = if col.iter().sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
            components.extend(col.iter().map(|&v| (v * sign) as f32));
            spread.push(eig.eigenvalues[k].max(0.0).sqrt() as f32);
        }
        Ok(Self {
            patch,
            latent,
            mean: mean.into_iter().map(|v| v as f32).collect(),
            components,
            spread,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = PatchAutoencoderFile {
            format: BACKEND_FORMAT.into(),
            version: BACKEND_VERSION,
            patch: self.patch,
            latent: self.latent,
            mean: F32Blob::from_slice(&self.mean),
            components: F32Blob::from_slice(&self.components),
            spread: F32Blob::from_slice(&self.spread),
        };
        std::fs::write(path, serde_json::to_vec(&file)?).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let file: PatchAutoencoderFile =
            serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if file.format != BACKEND_FORMAT {
            return Err(Error::Checkpoint(format!("{} is not a backend weights file", path.display())));
        }
        if file.version != BACKEND_VERSION {
            return Err(Error::VersionMismatch {
                found: file.version,
                expected: BACKEND_VERSION,
            });
        }
        let ae = Self {
            patch: file.patch,
            latent: file.latent,
            mean: file.mean.decode().map_err(Error::Checkpoint)?,
            components: file.components.decode().map_err(Error::Checkpoint)?,
            spread: file.spread.decode().map_err(Error::Checkpoint)?,
        };
        ae.check()?;
        Ok(ae)
    }

    pub fn check(&self) -> Result<()> {
        let d = self.dim();
        if self.patch == 0
            || self.mean.len() != d
            || self.components.len() != self.latent * d
            || self.spread.len() != self.latent
        {
            return Err(Error::Checkpoint("patch autoencoder weights have inconsistent sizes".into()));
        }
        Ok(())
    }

    pub fn checksum(&self) -> String {
        checksum_f32([self.mean.as_slice(), &self.components, &self.spread])
    }

    fn grid(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.patch), w.div_ceil(self.patch))
    }
}

/// Reads one patch as `patch*patch*3` values, replicating edge pixels past
/// the border.
fn read_patch(img: &Image, px: usize, py: usize, patch: usize, out: &mut [f32]) {
    let (w, h) = (img.width(), img.height());
    let mut n = 0;
    for dy in 0..patch {
        let y = (py * patch + dy).min(h - 1);
        for dx in 0..patch {
            let x = (px * patch + dx).min(w - 1);
            for c in 0..3 {
                out[n] = img.get(x, y, c);
                n += 1;
            }
        }
    }
}

impl ReconstructionBackend for PatchAutoencoder {
    fn id(&self) -> String {
        format!("patch-ae-{}x{}-k{}-{}", self.patch, self.patch, self.latent, &self.checksum()[..12])
    }

    fn encode(&self, x: &Image) -> Result<Latent> {
        if x.channels() != 3 {
            return Err(Error::ShapeMismatch {
                expected: "3 channels".into(),
                got: format!("{} channels", x.channels()),
            });
        }
        let d = self.dim();
        let (gh, gw) = self.grid(x.height(), x.width());
        let mut patches = Array2::<f32>::zeros((gh * gw, d));
        let mut buf = vec![0.0f32; d];
        for py in 0..gh {
            for px in 0..gw {
                read_patch(x, px, py, self.patch, &mut buf);
                let mut row = patches.row_mut(py * gw + px);
                for j in 0..d {
                    row[j] = buf[j] - self.mean[j];
                }
            }
        }
        let comps = Array2::from_shape_vec((self.latent, d), self.components.clone()).expect("checked sizes");
        let mu = patches.dot(&comps.t());
        let sigma = (0..gh * gw).flat_map(|_| self.spread.iter().copied()).collect();
        Ok(Latent {
            mu: mu.into_raw_vec_and_offset().0,
            sigma,
            image_shape: x.shape(),
        })
    }

    fn decode(&self, mu: &[f32], (h, w, c): (usize, usize, usize)) -> Result<Image> {
        let (gh, gw) = self.grid(h, w);
        if c != 3 || mu.len() != gh * gw * self.latent {
            return Err(Error::ShapeMismatch {
                expected: format!("{} latents for a {h}x{w}x3 image", gh * gw * self.latent),
                got: format!("{} latents, {c} channels", mu.len()),
            });
        }
        let d = self.dim();
        let comps = Array2::from_shape_vec((self.latent, d), self.components.clone()).expect("checked sizes");
        let codes = Array2::from_shape_vec((gh * gw, self.latent), mu.to_vec()).expect("checked sizes");
        let patches = codes.dot(&comps);
        let mut out = Image::filled(w, h, 3, 0.0)?;
        let p = self.patch;
        for py in 0..gh {
            for px in 0..gw {
                let row = patches.row(py * gw + px);
                let mut n = 0;
                for dy in 0..p {
                    for dx in 0..p {
                        let (x, y) = (px * p + dx, py * p + dy);
                        for ch in 0..3 {
                            if x < w && y < h {
                                out.set(x, y, ch, row[n] + self.mean[n]);
                            }
                            n += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Which reconstruction backend tier to use.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendChoice {
    Identity,
    /// Patch autoencoder fitted on the real training images.
    Toy,
    /// Pre-trained patch autoencoder weights loaded from a file.
    External(String),
}

impl Default for BackendChoice {
    fn default() -> Self {
        BackendChoice::Toy
    }
}

impl FromStr for BackendChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(BackendChoice::Identity),
            "toy" => Ok(BackendChoice::Toy),
            _ => match s.strip_prefix("external:") {
                Some(p) if !p.is_empty() => Ok(BackendChoice::External(p.to_string())),
                _ => Err(Error::Config(format!("unknown reconstruction backend `{s}` (identity|toy|external:<path>)"))),
            },
        }
    }
}

impl fmt::Display for BackendChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendChoice::Identity => f.write_str("identity"),
            BackendChoice::Toy => f.write_str("toy"),
            BackendChoice::External(p) => write!(f, "external:{p}"),
        }
    }
}

/// A concrete backend that can be stored in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredBackend {
    Identity,
    Patch(PatchAutoencoder),
}

impl StoredBackend {
    pub fn as_backend(&self) -> Arc<dyn ReconstructionBackend> {
        match self {
            StoredBackend::Identity => Arc::new(IdentityBackend),
            StoredBackend::Patch(p) => Arc::new(p.clone()),
        }
    }
}

// ---------------------------------------------------------------------------
// Encoder

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEncoderConfig {
    /// Channels of the stem and residual block.
    pub channels: usize,
    /// Kernel and stride of the patchifying stem.
    pub stem_kernel: usize,
    /// Length of `v_art`.
    pub dim: usize,
}

impl Default for ArtifactEncoderConfig {
    fn default() -> Self {
        Self {
            channels: 12,
            stem_kernel: 8,
            dim: 32,
        }
    }
}

/// Residual CNN: patchify stem, one basic residual block, global average
/// pooling and a linear projection to `dim`.
#[derive(Debug, Clone)]
pub struct ArtifactEncoder {
    pub config: ArtifactEncoderConfig,
    pub stem: Conv2d,
    pub conv_a: Conv2d,
    pub conv_b: Conv2d,
    /// `(dim, channels)`
    pub fc_weight: Array2<f32>,
    pub fc_bias: Array1<f32>,
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    cols_stem: Array2<f32>,
    a0: Array3<f32>,
    cols_a: Array2<f32>,
    a1: Array3<f32>,
    cols_b: Array2<f32>,
    a2: Array3<f32>,
    pooled: Array1<f32>,
}

#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub stem: ConvGrads,
    pub conv_a: ConvGrads,
    pub conv_b: ConvGrads,
    pub fc_weight: Array2<f32>,
    pub fc_bias: Array1<f32>,
}

#[derive(Debug, Clone, Default)]
pub struct EncoderMoments {
    slots: [Moments<f32>; 8],
}

impl ArtifactEncoder {
    pub fn new(config: ArtifactEncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let stem = Conv2d::new(3, c, config.stem_kernel, config.stem_kernel, 0, &mut rng);
        let conv_a = Conv2d::new(c, c, 3, 1, 1, &mut rng);
        let mut conv_b = Conv2d::new(c, c, 3, 1, 1, &mut rng);
        // Start the residual branch near identity.
        conv_b.weight.mapv_inplace(|v| v * 0.1);
        let bound = (1.0 / c as f32).sqrt();
        let fc_weight = Array2::from_shape_fn((config.dim, c), |_| rng.gen_range(-bound..bound));
        Self {
            config,
            stem,
            conv_a,
            conv_b,
            fc_weight,
            fc_bias: Array1::zeros(config.dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    fn to_chw(&self, map: &ArtifactMap) -> Result<Array3<f32>> {
        let img = map.delta();
        let k = self.config.stem_kernel;
        if img.channels() != 3 || img.width() < k || img.height() < k {
            return Err(Error::ShapeMismatch {
                expected: format!("at least {k}x{k}x3 artifact map"),
                got: format!("{:?}", img.shape()),
            });
        }
        let (h, w, _) = img.shape();
        let hwc = Array3::from_shape_vec((h, w, 3), img.data().to_vec()).expect("image shape");
        Ok(hwc.permuted_axes([2, 0, 1]).as_standard_layout().to_owned())
    }

    /// Inference-mode encoding.
    pub fn encode(&self, map: &ArtifactMap) -> Result<Vec<f64>> {
        Ok(self.forward(map)?.0)
    }

    pub fn forward(&self, map: &ArtifactMap) -> Result<(Vec<f64>, EncoderTrace)> {
        let x = self.to_chw(map)?;
        let (mut a0, cols_stem) = self.stem.forward(&x);
        relu_inplace(&mut a0);
        let (mut a1, cols_a) = self.conv_a.forward(&a0);
        relu_inplace(&mut a1);
        let (z2, cols_b) = self.conv_b.forward(&a1);
        let mut a2 = z2 + &a0;
        relu_inplace(&mut a2);
        let (_, h, w) = a2.dim();
        let pooled = a2.sum_axis(Axis(2)).sum_axis(Axis(1)) / (h * w) as f32;
        let out = self.fc_weight.dot(&pooled) + &self.fc_bias;
        Ok((
            out.iter().map(|&v| v as f64).collect(),
            EncoderTrace {
                cols_stem,
                a0,
                cols_a,
                a1,
                cols_b,
                a2,
                pooled,
            },
        ))
    }

    pub fn zero_grads(&self) -> EncoderGrads {
        EncoderGrads {
            stem: self.stem.zero_grads(),
            conv_a: self.conv_a.zero_grads(),
            conv_b: self.conv_b.zero_grads(),
            fc_weight: Array2::zeros(self.fc_weight.raw_dim()),
            fc_bias: Array1::zeros(self.fc_bias.len()),
        }
    }

    /// Accumulates parameter gradients for `dL/dv_art = grad`.
    pub fn backward(&self, trace: &EncoderTrace, grad: &[f64], grads: &mut EncoderGrads) {
        let g_out = Array1::from_iter(grad.iter().map(|&v| v as f32));
        for (mut row, &g) in grads.fc_weight.axis_iter_mut(Axis(0)).zip(g_out.iter()) {
            row.scaled_add(g, &trace.pooled);
        }
        grads.fc_bias += &g_out;
        let g_pooled = self.fc_weight.t().dot(&g_out);
        let (c, h, w) = trace.a2.dim();
        let scale = 1.0 / (h * w) as f32;
        let mut g2 = Array3::from_shape_fn((c, h, w), |(ch, _, _)| g_pooled[ch] * scale);
        relu_backward(&mut g2, &trace.a2);
        // Skip connection and residual branch both receive g2.
        let mut g_a1 = self
            .conv_b
            .backward(&trace.cols_b, &g2, &mut grads.conv_b, Some((h, w)))
            .expect("input grad requested");
        relu_backward(&mut g_a1, &trace.a1);
        let g_a0_branch = self
            .conv_a
            .backward(&trace.cols_a, &g_a1, &mut grads.conv_a, Some((h, w)))
            .expect("input grad requested");
        let mut g_a0 = g2 + &g_a0_branch;
        relu_backward(&mut g_a0, &trace.a0);
        self.stem.backward(&trace.cols_stem, &g_a0, &mut grads.stem, None);
    }

    pub fn apply_adam(&mut self, opt: &Adam, grads: &EncoderGrads, scale: f32, moments: &mut EncoderMoments) {
        let s = |a: &[f32]| a.iter().map(|v| v * scale).collect::<Vec<_>>();
        let [m0, m1, m2, m3, m4, m5, m6, m7] = &mut moments.slots;
        opt.update(self.stem.weight.as_slice_mut().unwrap(), &s(grads.stem.weight.as_slice().unwrap()), m0);
        opt.update(self.stem.bias.as_slice_mut().unwrap(), &s(grads.stem.bias.as_slice().unwrap()), m1);
        opt.update(self.conv_a.weight.as_slice_mut().unwrap(), &s(grads.conv_a.weight.as_slice().unwrap()), m2);
        opt.update(self.conv_a.bias.as_slice_mut().unwrap(), &s(grads.conv_a.bias.as_slice().unwrap()), m3);
        opt.update(self.conv_b.weight.as_slice_mut().unwrap(), &s(grads.conv_b.weight.as_slice().unwrap()), m4);
        opt.update(self.conv_b.bias.as_slice_mut().unwrap(), &s(grads.conv_b.bias.as_slice().unwrap()), m5);
        opt.update(self.fc_weight.as_slice_mut().unwrap(), &s(grads.fc_weight.as_slice().unwrap()), m6);
        opt.update(self.fc_bias.as_slice_mut().unwrap(), &s(grads.fc_bias.as_slice().unwrap()), m7);
    }

    pub fn checksum(&self) -> String {
        checksum_f32([
            self.stem.weight.as_slice().unwrap(),
            self.stem.bias.as_slice().unwrap(),
            self.conv_a.weight.as_slice().unwrap(),
            self.conv_a.bias.as_slice().unwrap(),
            self.conv_b.weight.as_slice().unwrap(),
            self.conv_b.bias.as_slice().unwrap(),
            self.fc_weight.as_slice().unwrap(),
            self.fc_bias.as_slice().unwrap(),
        ])
    }

    pub fn state(&self) -> ArtifactEncoderState {
        ArtifactEncoderState {
            config: self.config,
            stem: (&self.stem).into(),
            conv_a: (&self.conv_a).into(),
            conv_b: (&self.conv_b).into(),
            fc_weight: F32Blob::from_slice(self.fc_weight.as_slice().unwrap()),
            fc_bias: F32Blob::from_slice(self.fc_bias.as_slice().unwrap()),
        }
    }
}

pub fn encode_artifact(map: &ArtifactMap, encoder: &ArtifactEncoder) -> Result<Vec<f64>> {
    encoder.encode(map)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactEncoderState {
    pub config: ArtifactEncoderConfig,
    pub stem: ConvState,
    pub conv_a: ConvState,
    pub conv_b: ConvState,
    pub fc_weight: F32Blob,
    pub fc_bias: F32Blob,
}

impl ArtifactEncoderState {
    pub fn restore(&self) -> std::result::Result<ArtifactEncoder, String> {
        let c = self.config.channels;
        let fc_w = self.fc_weight.decode()?;
        let fc_b = self.fc_bias.decode()?;
        if fc_w.len() != self.config.dim * c || fc_b.len() != self.config.dim {
            return Err("artifact encoder head size mismatch".into());
        }
        Ok(ArtifactEncoder {
            config: self.config,
            stem: self.stem.restore()?,
            conv_a: self.conv_a.restore()?,
            conv_b: self.conv_b.restore()?,
            fc_weight: Array2::from_shape_vec((self.config.dim, c), fc_w).map_err(|e| e.to_string())?,
            fc_bias: Array1::from(fc_b),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_image(seed: u64, w: usize, h: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, 3, |_, _, _| rng.gen::<f32>()).unwrap()
    }

    #[test]
    fn identity_backend_gives_zero_residual() {
        let x = rand_image(1, 17, 9);
        assert_eq!(reconstruct(&x, &IdentityBackend).unwrap(), x);
        assert!(extract_artifact(&x, &IdentityBackend).unwrap().is_zero());
    }

    #[test]
    fn shift_backend_clamps_and_residual_is_shift() {
        let x = Image::from_fn(6, 6, 3, |x, y, _| 0.2 + 0.1 * ((x + y) % 4) as f32).unwrap();
        let c = 0.05;
        let recon = reconstruct(&x, &ShiftBackend(c)).unwrap();
        for (a, b) in recon.data().iter().zip(x.data()) {
            assert!((a - (b + c).min(1.0)).abs() < 1e-6);
        }
        let delta = extract_artifact(&x, &ShiftBackend(c)).unwrap();
        assert!(delta.delta().data().iter().all(|v| (v - c).abs() < 1e-6));

        let bright = Image::filled(4, 4, 3, 0.98).unwrap();
        let recon = reconstruct(&bright, &ShiftBackend(0.05)).unwrap();
        assert!(recon.data().iter().all(|&v| v == 1.0));
    }

    /// Hand-worked linear backend on a 2x2 single channel image.
    ///
    /// x = (0.2, 0.4, 0.6, 0.8)
    /// E = [[0.5, 0.5, 0, 0], [0, 0, 0.5, 0.5]]  -> mu = (0.3, 0.7)
    /// D = [[1, 0], [0.5, 0.5], [0, 1], [0.25, 1]]
    /// x' = (0.3, 0.5, 0.7, 0.775)
    /// delta = (0.1, 0.1, 0.1, 0.025)
    pub(crate) fn toy_linear() -> LinearBackend {
        let e = DMatrix::from_row_slice(2, 4, &[0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5]);
        let d = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.5, 0.5, 0.0, 1.0, 0.25, 1.0]);
        LinearBackend::new((2, 2, 1), e, d).unwrap()
    }

    #[test]
    fn toy_linear_backend_matches_hand_algebra() {
        let x = Image::new(2, 2, 1, vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        let recon = reconstruct(&x, &toy_linear()).unwrap();
        let expected = [0.3, 0.5, 0.7, 0.775];
        for (a, b) in recon.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        let delta = extract_artifact(&x, &toy_linear()).unwrap();
        for (a, b) in delta.delta().data().iter().zip([0.1, 0.1, 0.1, 0.025]) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn linear_backend_rejects_other_shapes() {
        let x = Image::filled(3, 2, 1, 0.5).unwrap();
        assert!(matches!(reconstruct(&x, &toy_linear()), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn updown_constant_is_zero_and_checkerboard_is_not() {
        let c = Image::filled(8, 6, 3, 0.37).unwrap();
        let d = extract_updown_artifact(&c).unwrap();
        assert!(d.delta().data().iter().all(|v| v.abs() < 1e-6));
        let cb = Image::from_fn(4, 4, 1, |x, y, _| ((x + y) % 2) as f32).unwrap();
        assert!(extract_updown_artifact(&cb).unwrap().delta().data().iter().any(|&v| v > 0.0));
        assert!(extract_updown_artifact(&Image::filled(1, 5, 3, 0.1).unwrap()).is_err());
    }

    /// Ramp `x[y][x] = (4y + x) / 15`. The halve step averages 2x2 blocks;
    /// the double step samples at offsets -1/4 and +1/4 of a coarse pixel
    /// (clamped at the borders). Working both axes by hand gives the table.
    #[test]
    fn updown_ramp_matches_stepwise_table() {
        let ramp = Image::from_fn(4, 4, 1, |x, y, _| (4 * y + x) as f32 / 15.0).unwrap();
        // coarse = [[2.5, 4.5], [10.5, 12.5]] / 15
        // doubling (a, b) gives (a, .75a+.25b, .25a+.75b, b) on each axis:
        //   up * 15 = [[2.5, 3, 4, 4.5], [4.5, 5, 6, 6.5],
        //              [8.5, 9, 10, 10.5], [10.5, 11, 12, 12.5]]
        let expected_times_15 = [
            [2.5, 2.0, 2.0, 1.5],
            [0.5, 0.0, 0.0, 0.5],
            [0.5, 0.0, 0.0, 0.5],
            [1.5, 2.0, 2.0, 2.5],
        ];
        let d = extract_updown_artifact(&ramp).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let got = d.delta().get(x, y, 0) * 15.0;
                assert!((got - expected_times_15[y][x]).abs() < 1e-5, "({x},{y}) {got}");
            }
        }
    }

    #[test]
    fn patch_autoencoder_round_trip_and_shapes() {
        let imgs: Vec<_> = (0..4).map(|s| rand_image(s, 16, 16).gaussian_blur(1.0)).collect();
        let ae = PatchAutoencoder::fit(&imgs, 4, 48, 10_000, 0).unwrap();
        // Full rank reconstructs exactly.
        let x = rand_image(9, 13, 10);
        let recon = reconstruct(&x, &ae).unwrap();
        let max = recon.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(max < 1e-4, "{max}");

        let low = PatchAutoencoder::fit(&imgs, 4, 4, 10_000, 0).unwrap();
        let delta = extract_artifact(&x, &low).unwrap();
        assert_eq!(delta.delta().shape(), x.shape());
        assert!(!delta.is_zero());
        let latent = low.encode(&x).unwrap();
        assert_eq!(latent.sigma.len(), latent.mu.len());
    }

    #[test]
    fn patch_autoencoder_file_round_trip() {
        let imgs = vec![rand_image(2, 16, 16)];
        let ae = PatchAutoencoder::fit(&imgs, 4, 6, 1000, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ae.json");
        ae.save(&p).unwrap();
        assert_eq!(PatchAutoencoder::load(&p).unwrap(), ae);
        std::fs::write(&p, b"{not json").unwrap();
        assert!(matches!(PatchAutoencoder::load(&p), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn backend_choice_parsing() {
        assert_eq!("toy".parse::<BackendChoice>().unwrap(), BackendChoice::Toy);
        assert_eq!(
            "external:/w/ae.json".parse::<BackendChoice>().unwrap(),
            BackendChoice::External("/w/ae.json".into())
        );
        assert!("external:".parse::<BackendChoice>().is_err());
        assert!("vae".parse::<BackendChoice>().is_err());
    }

    #[test]
    fn encoder_shape_determinism_and_zero_head() {
        let enc = ArtifactEncoder::new(ArtifactEncoderConfig::default(), 4);
        let x = rand_image(5, 64, 48);
        let map = extract_updown_artifact(&x).unwrap();
        let a = encode_artifact(&map, &enc).unwrap();
        let b = encode_artifact(&map, &enc).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), enc.dim());
        let other = extract_updown_artifact(&rand_image(6, 40, 40)).unwrap();
        assert_eq!(encode_artifact(&other, &enc).unwrap().len(), enc.dim());

        let mut zero = enc.clone();
        zero.fc_weight.fill(0.0);
        zero.fc_bias.fill(0.0);
        assert!(encode_artifact(&map, &zero).unwrap().iter().all(|&v| v == 0.0));

        let tiny = ArtifactMap::new(Image::filled(4, 4, 3, 0.0).unwrap()).unwrap();
        assert!(matches!(enc.encode(&tiny), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn encoder_backward_matches_finite_differences() {
        let cfg = ArtifactEncoderConfig {
            channels: 3,
            stem_kernel: 4,
            dim: 2,
        };
        let mut enc = ArtifactEncoder::new(cfg, 11);
        let map = ArtifactMap::new(rand_image(3, 16, 16)).unwrap();
        let probe = [0.7, -1.3];
        let loss = |e: &ArtifactEncoder| -> f64 {
            e.encode(&map).unwrap().iter().zip(probe).map(|(a, b)| a * b).sum()
        };
        let (_, trace) = enc.forward(&map).unwrap();
        let mut grads = enc.zero_grads();
        enc.backward(&trace, &probe, &mut grads);
        let h = 1e-2f32;
        let checks: [(usize, usize); 3] = [(0, 3), (1, 7), (2, 20)];
        for (layer, idx) in checks {
            let analytic = match layer {
                0 => grads.stem.weight.as_slice().unwrap()[idx],
                1 => grads.conv_a.weight.as_slice().unwrap()[idx],
                _ => grads.conv_b.weight.as_slice().unwrap()[idx],
            } as f64;
            let orig = *weight_mut(&mut enc, layer, idx);
            *weight_mut(&mut enc, layer, idx) = orig + h;
            let up = loss(&enc);
            *weight_mut(&mut enc, layer, idx) = orig - h;
            let down = loss(&enc);
            *weight_mut(&mut enc, layer, idx) = orig;
            let fd = (up - down) / (2.0 * h as f64);
            assert!((fd - analytic).abs() < 2e-3 * (1.0 + analytic.abs()), "layer {layer}: {fd} vs {analytic}");
        }
    }

    fn weight_mut(e: &mut ArtifactEncoder, layer: usize, idx: usize) -> &mut f32 {
        let conv = match layer {
            0 => &mut e.stem,
            1 => &mut e.conv_a,
            _ => &mut e.conv_b,
        };
        &mut conv.weight.as_slice_mut().unwrap()[idx]
    }

    #[test]
    fn encoder_state_round_trip_is_bit_exact() {
        let enc = ArtifactEncoder::new(ArtifactEncoderConfig::default(), 9);
        let back = enc.state().restore().unwrap();
        assert_eq!(back.checksum(), enc.checksum());
    }
}
