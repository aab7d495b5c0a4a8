//! Post-processing transforms, the training-time JPEG policy and input
//! standardization.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;

/// Edge length of the detector input.
pub const INPUT_SIZE: usize = 224;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Jpeg,
    Blur,
    Resize,
    Noise,
    Brightness,
    Saturation,
    Contrast,
}

impl TransformKind {
    pub const ALL: [TransformKind; 7] = [
        TransformKind::Jpeg,
        TransformKind::Blur,
        TransformKind::Resize,
        TransformKind::Noise,
        TransformKind::Brightness,
        TransformKind::Saturation,
        TransformKind::Contrast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Jpeg => "jpeg",
            TransformKind::Blur => "blur",
            TransformKind::Resize => "resize",
            TransformKind::Noise => "noise",
            TransformKind::Brightness => "brightness",
            TransformKind::Saturation => "saturation",
            TransformKind::Contrast => "contrast",
        }
    }

    /// Parameter range of the standard robustness benchmark for this kind.
    pub fn benchmark_range(self) -> (f64, f64) {
        match self {
            TransformKind::Jpeg => (75.0, 95.0),
            TransformKind::Blur => (0.5, 2.5),
            TransformKind::Resize => (128.0, 640.0),
            TransformKind::Noise => (0.05, 0.25),
            TransformKind::Brightness | TransformKind::Saturation | TransformKind::Contrast => (0.5, 2.5),
        }
    }

    /// Parameter value that reports the untransformed reference point of a
    /// robustness curve.
    pub fn identity_param(self) -> f64 {
        match self {
            TransformKind::Jpeg => 100.0,
            TransformKind::Blur | TransformKind::Noise => 0.0,
            TransformKind::Resize => INPUT_SIZE as f64,
            TransformKind::Brightness | TransformKind::Saturation | TransformKind::Contrast => 1.0,
        }
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TransformKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::InvalidTransform(format!("unknown transform kind `{s}`")))
    }
}

/// One parameterized transform. `param` is the JPEG quality, blur radius
/// (Gaussian sigma), resize target edge, noise std, or color factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub kind: TransformKind,
    pub param: f64,
}

impl TransformSpec {
    pub fn new(kind: TransformKind, param: f64) -> Result<Self> {
        let spec = Self { kind, param };
        spec.validate()?;
        Ok(spec)
    }

    pub fn jpeg(quality: u8) -> Self {
        Self {
            kind: TransformKind::Jpeg,
            param: quality as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.param;
        let bad = |bound: &str| Err(Error::InvalidTransform(format!("{}: parameter {} violates {}", self.kind, p, bound)));
        if !p.is_finite() {
            return bad("finite value");
        }
        match self.kind {
            TransformKind::Jpeg if p.fract() != 0.0 || !(1.0..=100.0).contains(&p) => bad("integer quality in [1, 100]"),
            TransformKind::Blur if p <= 0.0 => bad("radius > 0"),
            TransformKind::Resize if p < 16.0 => bad("target edge >= 16"),
            TransformKind::Noise if p < 0.0 => bad("std >= 0"),
            TransformKind::Brightness | TransformKind::Saturation | TransformKind::Contrast if p <= 0.0 => {
                bad("factor > 0")
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for TransformSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.param)
    }
}

impl FromStr for TransformSpec {
    type Err = Error;

    /// Parses the compact `kind:param` form, e.g. `jpeg:85` or `blur:1.5`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, param) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidTransform(format!("expected `kind:param`, got `{s}`")))?;
        let param: f64 = param
            .trim()
            .parse()
            .map_err(|_| Error::InvalidTransform(format!("bad parameter in `{s}`")))?;
        TransformSpec::new(kind.parse()?, param)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMode {
    /// Output is exactly `param x param`.
    #[default]
    Square,
    /// Short edge becomes `param`, aspect ratio kept.
    ShortEdge,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformOptions {
    pub resize_mode: ResizeMode,
}

/// Applies `spec` with default options. `rng` only feeds the noise kind.
pub fn apply_transform<R: Rng + ?Sized>(image: &Image, spec: &TransformSpec, rng: &mut R) -> Result<Image> {
    apply_transform_with(image, spec, TransformOptions::default(), rng)
}

pub fn apply_transform_with<R: Rng + ?Sized>(
    image: &Image,
    spec: &TransformSpec,
    opts: TransformOptions,
    rng: &mut R,
) -> Result<Image> {
    spec.validate()?;
    let p = spec.param;
    let out = match spec.kind {
        TransformKind::Jpeg => image.jpeg_roundtrip(p as u8)?,
        TransformKind::Blur => image.gaussian_blur(p as f32),
        TransformKind::Resize => {
            let edge = p.round() as usize;
            let (w, h) = match opts.resize_mode {
                ResizeMode::Square => (edge, edge),
                ResizeMode::ShortEdge => {
                    let (w, h) = (image.width() as f64, image.height() as f64);
                    let scale = edge as f64 / w.min(h);
                    (((w * scale).round() as usize).max(1), ((h * scale).round() as usize).max(1))
                }
            };
            image.resize_bilinear(w, h)?
        }
        TransformKind::Noise => {
            if p == 0.0 {
                image.clone()
            } else {
                let normal = Normal::new(0.0f32, p as f32).expect("validated std");
                let mut out = image.clone();
                for v in out.data_mut() {
                    *v += normal.sample(rng);
                }
                out
            }
        }
        TransformKind::Brightness => image.map(|v| v * p as f32),
        TransformKind::Contrast => {
            let mean = image.to_gray().mean() as f32;
            image.map(|v| mean + p as f32 * (v - mean))
        }
        TransformKind::Saturation => saturate(image, p as f32),
    };
    Ok(out.clamp01())
}

fn saturate(image: &Image, factor: f32) -> Image {
    if image.channels() < 3 {
        return image.clone();
    }
    let gray = image.to_gray();
    let mut out = image.clone();
    let c = image.channels();
    for (px, &g) in out.data_mut().chunks_exact_mut(c).zip(gray.data()) {
        for v in px.iter_mut().take(3) {
            *v = g + factor * (*v - g);
        }
    }
    out
}

/// Training-time augmentation: JPEG with probability `jpeg_probability` at a
/// uniform integer quality in `jpeg_quality_range` (inclusive).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub jpeg_probability: f64,
    pub jpeg_quality_range: (u8, u8),
    pub seed: u64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            jpeg_probability: 0.5,
            jpeg_quality_range: (75, 95),
            seed: 0,
        }
    }
}

impl AugmentationPolicy {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.jpeg_quality_range;
        if !(0.0..=1.0).contains(&self.jpeg_probability) {
            return Err(Error::Config(format!("jpeg_probability {} outside [0, 1]", self.jpeg_probability)));
        }
        if lo == 0 || lo > hi || hi > 100 {
            return Err(Error::Config(format!("jpeg quality range [{lo}, {hi}] invalid")));
        }
        Ok(())
    }
}

pub fn sample_train_augmentation<R: Rng + ?Sized>(policy: &AugmentationPolicy, rng: &mut R) -> Option<TransformSpec> {
    if rng.gen::<f64>() < policy.jpeg_probability {
        let (lo, hi) = policy.jpeg_quality_range;
        Some(TransformSpec::jpeg(rng.gen_range(lo..=hi)))
    } else {
        None
    }
}

/// Square-stretches to `INPUT_SIZE x INPUT_SIZE x 3` with bilinear
/// resampling. Single channel inputs are replicated to RGB.
pub fn preprocess_input(image: &Image) -> Result<Image> {
    let rgb = match image.channels() {
        3 => image.clone(),
        1 => Image::from_fn(image.width(), image.height(), 3, |x, y, _| image.get(x, y, 0))?,
        c if c > 3 => Image::from_fn(image.width(), image.height(), 3, |x, y, ch| image.get(x, y, ch))?,
        c => {
            return Err(Error::ShapeMismatch {
                expected: "1 or 3 channels".into(),
                got: format!("{c} channels"),
            })
        }
    };
    Ok(rgb.resize_bilinear(INPUT_SIZE, INPUT_SIZE)?.clamp01())
}
