//! Average frequency-energy maps and the high-frequency gap between two
//! corpora.

use std::path::Path;

use image::{GrayImage, Luma};
use ndarray::Array2;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumScale {
    /// `log1p(|F|)`
    #[default]
    LogMagnitude,
    /// `log1p(|F|^2)`
    LogPower,
}

/// What the denoiser contributes before the transform.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiseMode {
    /// Transform the raw grayscale image.
    Off,
    /// Transform the denoised image.
    Denoised,
    /// Transform the noise residual `x - denoise(x)`.
    #[default]
    Residual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumOptions {
    /// Square analysis size; images of other sizes are resized.
    pub size: usize,
    pub scale: SpectrumScale,
    pub denoise: DenoiseMode,
}

impl Default for SpectrumOptions {
    fn default() -> Self {
        Self {
            size: 256,
            scale: SpectrumScale::LogMagnitude,
            denoise: DenoiseMode::Residual,
        }
    }
}

/// Corpus-averaged centered spectrum. The DC bin sits at
/// `(rows / 2, cols / 2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumMap {
    pub energy: Array2<f64>,
    pub n_images: usize,
}

/// Centered (`fftshift`ed) spectrum of one image under `opts`, using
/// `denoiser` for the denoise step.
pub fn image_spectrum_with(
    image: &Image,
    opts: &SpectrumOptions,
    denoiser: &(dyn Fn(&Image) -> Image + Sync),
) -> Result<Array2<f64>> {
    if opts.size == 0 {
        return Err(Error::Config("analysis size must be positive".into()));
    }
    let mut gray = image.to_gray();
    if gray.width() != opts.size || gray.height() != opts.size {
        gray = gray.resize_bilinear(opts.size, opts.size)?;
    }
    let signal = match opts.denoise {
        DenoiseMode::Off => gray,
        DenoiseMode::Denoised => denoiser(&gray),
        DenoiseMode::Residual => {
            let d = denoiser(&gray);
            if !d.same_shape(&gray) {
                return Err(Error::ShapeMismatch {
                    expected: format!("{:?}", gray.shape()),
                    got: format!("{:?}", d.shape()),
                });
            }
            let data = gray.data().iter().zip(d.data()).map(|(a, b)| a - b).collect();
            Image::new(gray.width(), gray.height(), 1, data)?
        }
    };
    let n = opts.size;
    let mut buf: Vec<Complex<f64>> = signal.data().iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
    fft2(&mut buf, n, n);
    let half = n / 2;
    let mut out = Array2::<f64>::zeros((n, n));
    for r in 0..n {
        for c in 0..n {
            let z = buf[r * n + c];
            let v = match opts.scale {
                SpectrumScale::LogMagnitude => z.norm().ln_1p(),
                SpectrumScale::LogPower => z.norm_sqr().ln_1p(),
            };
            out[[(r + half) % n, (c + half) % n]] = v;
        }
    }
    Ok(out)
}

pub fn image_spectrum(image: &Image, opts: &SpectrumOptions) -> Result<Array2<f64>> {
    image_spectrum_with(image, opts, &Image::median3)
}

/// In-place unnormalized 2-D DFT of a row-major `rows x cols` buffer.
fn fft2(buf: &mut [Complex<f64>], rows: usize, cols: usize) {
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(cols);
    for row in buf.chunks_exact_mut(cols) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(rows);
    let mut col = vec![Complex::new(0.0, 0.0); rows];
    for c in 0..cols {
        for r in 0..rows {
            col[r] = buf[r * cols + c];
        }
        col_fft.process(&mut col);
        for r in 0..rows {
            buf[r * cols + c] = col[r];
        }
    }
}

const CHUNK: usize = 32;

/// Averages per-image spectra with the median filter as denoiser.
pub fn mean_spectrum<I>(images: I, opts: &SpectrumOptions) -> Result<SpectrumMap>
where
    I: IntoIterator<Item = Result<Image>>,
{
    mean_spectrum_with(images, opts, &Image::median3)
}

/// Averages per-image spectra. Spectra are computed in parallel chunks and
/// summed in input order, so the result does not depend on thread count.
pub fn mean_spectrum_with<I>(
    images: I,
    opts: &SpectrumOptions,
    denoiser: &(dyn Fn(&Image) -> Image + Sync),
) -> Result<SpectrumMap>
where
    I: IntoIterator<Item = Result<Image>>,
{
    let mut sum = Array2::<f64>::zeros((opts.size, opts.size));
    let mut n_images = 0;
    let mut iter = images.into_iter();
    loop {
        let chunk = iter.by_ref().take(CHUNK).collect::<Result<Vec<Image>>>()?;
        if chunk.is_empty() {
            break;
        }
        let spectra = chunk
            .par_iter()
            .map(|img| image_spectrum_with(img, opts, denoiser))
            .collect::<Result<Vec<_>>>()?;
        for s in spectra {
            sum += &s;
            n_images += 1;
        }
    }
    if n_images == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(SpectrumMap {
        energy: sum / n_images as f64,
        n_images,
    })
}

impl SpectrumMap {
    /// Count-weighted mean of two maps.
    pub fn merge(&self, other: &SpectrumMap) -> Result<SpectrumMap> {
        if self.energy.dim() != other.energy.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.energy.dim()),
                got: format!("{:?}", other.energy.dim()),
            });
        }
        let n = self.n_images + other.n_images;
        let energy = (&self.energy * self.n_images as f64 + &other.energy * other.n_images as f64) / n as f64;
        Ok(SpectrumMap { energy, n_images: n })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_matrix_csv(&self.energy, path)
    }

    /// Min-max normalized 8-bit grayscale rendering.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        write_matrix_png(&self.energy, path)
    }
}

/// `true` outside the centered half-height, half-width rectangle.
pub fn high_frequency_mask(rows: usize, cols: usize) -> Array2<bool> {
    let inside = |i: usize, n: usize| i >= n / 4 && i < n - n / 4;
    Array2::from_shape_fn((rows, cols), |(r, c)| !(inside(r, rows) && inside(c, cols)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapReport {
    /// Mean `|synth - real|` over the high-frequency band.
    pub gap: f64,
    /// `synth - real`, for plotting.
    pub difference: Array2<f64>,
}

pub fn spectrum_gap_report(real: &SpectrumMap, synth: &SpectrumMap) -> Result<GapReport> {
    if real.energy.dim() != synth.energy.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", real.energy.dim()),
            got: format!("{:?}", synth.energy.dim()),
        });
    }
    let difference = &synth.energy - &real.energy;
    let (rows, cols) = difference.dim();
    let mask = high_frequency_mask(rows, cols);
    let (sum, n) = difference
        .iter()
        .zip(mask.iter())
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), (d, _)| (s + d.abs(), n + 1));
    if n == 0 {
        return Err(Error::ShapeMismatch {
            expected: "a map with a high-frequency band".into(),
            got: format!("{rows}x{cols}"),
        });
    }
    Ok(GapReport {
        gap: sum / n as f64,
        difference,
    })
}

pub fn write_matrix_csv(m: &Array2<f64>, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for row in m.rows() {
        w.write_record(row.iter().map(|v| format!("{v}")))?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_matrix_csv(path: &Path) -> Result<Array2<f64>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        if *cols.get_or_insert(rec.len()) != rec.len() {
            return Err(Error::Config(format!("{}: ragged matrix", path.display())));
        }
        for field in rec.iter() {
            data.push(
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("{}: bad number `{field}`", path.display())))?,
            );
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::Config(format!("{}: empty matrix", path.display())))?;
    Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Config(e.to_string()))
}

pub fn write_matrix_png(m: &Array2<f64>, path: &Path) -> Result<()> {
    let (lo, hi) = m.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (rows, cols) = m.dim();
    let img = GrayImage::from_fn(cols as u32, rows as u32, |x, y| {
        Luma([((m[[y as usize, x as usize]] - lo) / span * 255.0).round() as u8])
    });
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn opts(size: usize) -> SpectrumOptions {
        SpectrumOptions {
            size,
            scale: SpectrumScale::LogMagnitude,
            denoise: DenoiseMode::Off,
        }
    }

    fn random_gray(seed: u64, n: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(n, n, 1, |_, _, _| rng.gen::<f32>()).unwrap()
    }

    /// Textbook O(n^4) DFT, shifted by hand.
    fn naive_centered_log_magnitude(img: &Image) -> Array2<f64> {
        let n = img.width();
        let mut out = Array2::zeros((n, n));
        for u in 0..n {
            for v in 0..n {
                let (mut re, mut im) = (0.0f64, 0.0f64);
                for y in 0..n {
                    for x in 0..n {
                        let a = -2.0 * std::f64::consts::PI * ((u * y) as f64 / n as f64 + (v * x) as f64 / n as f64);
                        let p = img.get(x, y, 0) as f64;
                        re += p * a.cos();
                        im += p * a.sin();
                    }
                }
                let shifted = ((u + n / 2) % n, (v + n / 2) % n);
                out[[shifted.0, shifted.1]] = (re * re + im * im).sqrt().ln_1p();
            }
        }
        out
    }

    #[test]
    fn matches_per_image_dft_then_average() {
        let images: Vec<Image> = (0..16).map(|s| random_gray(s, 16)).collect();
        let map = mean_spectrum(images.iter().cloned().map(Ok), &opts(16)).unwrap();
        let mut oracle = Array2::<f64>::zeros((16, 16));
        for img in &images {
            oracle += &naive_centered_log_magnitude(img);
        }
        oracle /= 16.0;
        let worst = (&map.energy - &oracle).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst < 1e-9, "{worst}");
        assert_eq!(map.n_images, 16);
    }

    #[test]
    fn constant_images_have_only_dc() {
        let img = Image::filled(32, 32, 3, 0.4).unwrap();
        let map = mean_spectrum([Ok(img)], &opts(32)).unwrap();
        for ((r, c), &v) in map.energy.indexed_iter() {
            if (r, c) != (16, 16) {
                assert!(v <= 1e-9, "bin {r},{c} = {v}");
            }
        }
        assert!(map.energy[[16, 16]] > 0.0);
    }

    #[test]
    fn checkerboard_peaks_at_nyquist_corner() {
        let img = Image::from_fn(8, 8, 1, |x, y, _| ((x + y) % 2) as f32).unwrap();
        let map = mean_spectrum([Ok(img)], &opts(8)).unwrap();
        let mut best = ((0, 0), f64::MIN);
        for ((r, c), &v) in map.energy.indexed_iter() {
            if (r, c) != (4, 4) && v > best.1 {
                best = ((r, c), v);
            }
        }
        assert_eq!(best.0, (0, 0));
        let others = map
            .energy
            .indexed_iter()
            .filter(|(rc, _)| *rc != (0, 0) && *rc != (4, 4))
            .fold(0.0f64, |m, (_, v)| m.max(*v));
        assert!(others < 1e-9);
    }

    #[test]
    fn circular_shift_keeps_magnitudes() {
        let img = random_gray(5, 32);
        let a = image_spectrum(&img, &opts(32)).unwrap();
        let b = image_spectrum(&img.roll(5, 11), &opts(32)).unwrap();
        let worst = (&a - &b).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn merge_is_count_weighted() {
        let a: Vec<Image> = (0..3).map(|s| random_gray(s, 16)).collect();
        let b: Vec<Image> = (10..15).map(|s| random_gray(s, 16)).collect();
        let o = SpectrumOptions { size: 16, ..Default::default() };
        let ma = mean_spectrum(a.iter().cloned().map(Ok), &o).unwrap();
        let mb = mean_spectrum(b.iter().cloned().map(Ok), &o).unwrap();
        let all = mean_spectrum(a.iter().chain(&b).cloned().map(Ok), &o).unwrap();
        let merged = ma.merge(&mb).unwrap();
        assert_eq!(merged.n_images, 8);
        let worst = (&merged.energy - &all.energy).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst < 1e-9);
    }

    #[test]
    fn gap_examples() {
        let real = SpectrumMap {
            energy: Array2::from_shape_fn((8, 8), |(r, c)| (r * 8 + c) as f64 * 0.1),
            n_images: 1,
        };
        assert_eq!(spectrum_gap_report(&real, &real).unwrap().gap, 0.0);
        let mask = high_frequency_mask(8, 8);
        assert_eq!(mask.iter().filter(|&&m| !m).count(), 16);
        let mut synth = real.clone();
        ndarray::Zip::from(&mut synth.energy).and(&mask).for_each(|e, &m| {
            if m {
                *e += 1.0
            }
        });
        let g = spectrum_gap_report(&real, &synth).unwrap();
        assert!((g.gap - 1.0).abs() < 1e-12);
        let small = SpectrumMap {
            energy: Array2::zeros((4, 4)),
            n_images: 1,
        };
        assert!(spectrum_gap_report(&real, &small).is_err());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let r = mean_spectrum(std::iter::empty(), &SpectrumOptions::default());
        assert!(matches!(r, Err(Error::EmptyInput)));
    }

    #[test]
    fn matrix_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Array2::from_shape_fn((3, 4), |(r, c)| r as f64 * 0.1 + c as f64 / 3.0);
        let p = dir.path().join("m.csv");
        write_matrix_csv(&m, &p).unwrap();
        assert_eq!(read_matrix_csv(&p).unwrap(), m);
        write_matrix_png(&m, &dir.path().join("m.png")).unwrap();
    }
}
