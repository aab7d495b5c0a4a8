//! Floating point raster images and the resampling primitives shared by the
//! augmentation, artifact and spectrum modules.
//!
//! Pixels are stored interleaved (HWC) as `f32` intensities, nominally in
//! `[0, 1]`.

use std::path::Path;

use image::codecs::jpeg::JpegEncoder;
use image::{DynamicImage, ImageBuffer, Rgb};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::EmptyImage);
        }
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}x{} = {} values", height, width, channels, width * height * channels),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::new(width, height, channels, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width, channels)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.shape() == other.shape()
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn clamp01(mut self) -> Image {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    /// Elementwise `|self - other|`.
    pub fn abs_diff(&self, other: &Image) -> Result<Image> {
        if !self.same_shape(other) {
            return Err(shape_err(self, other));
        }
        Ok(Image {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a - b).abs())
                .collect(),
            ..*self
        })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Rec. 601 luma for RGB, passthrough for single channel images.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2])
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Bilinear resampling with half-pixel centers and edge clamping.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Result<Image> {
        if width == 0 || height == 0 {
            return Err(Error::EmptyImage);
        }
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let xs = axis_taps(self.width, width);
        let ys = axis_taps(self.height, height);
        let c = self.channels;
        let mut data = vec![0.0f32; width * height * c];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let row0 = &self.data[y0 * self.width * c..(y0 + 1) * self.width * c];
            let row1 = &self.data[y1 * self.width * c..(y1 + 1) * self.width * c];
            let out = &mut data[oy * width * c..(oy + 1) * width * c];
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                for ch in 0..c {
                    let top = row0[x0 * c + ch] * (1.0 - fx) + row0[x1 * c + ch] * fx;
                    let bot = row1[x0 * c + ch] * (1.0 - fx) + row1[x1 * c + ch] * fx;
                    out[ox * c + ch] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        Image::new(width, height, c, data)
    }

    /// Separable Gaussian blur; `sigma` is the kernel standard deviation in
    /// pixels. Borders replicate the edge pixel.
    pub fn gaussian_blur(&self, sigma: f32) -> Image {
        if sigma <= 0.0 {
            return self.clone();
        }
        let kernel = gaussian_kernel(sigma);
        let half = (kernel.len() / 2) as isize;
        let (w, h, c) = (self.width as isize, self.height as isize, self.channels);
        let mut tmp = vec![0.0f32; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (k, &kv) in kernel.iter().enumerate() {
                        let sx = (x + k as isize - half).clamp(0, w - 1);
                        acc += kv * self.data[((y * w + sx) as usize) * c + ch];
                    }
                    tmp[((y * w + x) as usize) * c + ch] = acc;
                }
            }
        }
        let mut out = vec![0.0f32; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (k, &kv) in kernel.iter().enumerate() {
                        let sy = (y + k as isize - half).clamp(0, h - 1);
                        acc += kv * tmp[((sy * w + x) as usize) * c + ch];
                    }
                    out[((y * w + x) as usize) * c + ch] = acc;
                }
            }
        }
        Image { data: out, ..*self }
    }

    /// 3x3 median filter per channel with replicated borders.
    pub fn median3(&self) -> Image {
        let (w, h, c) = (self.width as isize, self.height as isize, self.channels);
        let mut out = vec![0.0f32; self.data.len()];
        let mut window = [0.0f32; 9];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut n = 0;
                    for dy in -1..=1 {
                        for dx in -1..=1 {
                            let sx = (x + dx).clamp(0, w - 1);
                            let sy = (y + dy).clamp(0, h - 1);
                            window[n] = self.data[((sy * w + sx) as usize) * c + ch];
                            n += 1;
                        }
                    }
                    window.sort_by(f32::total_cmp);
                    out[((y * w + x) as usize) * c + ch] = window[4];
                }
            }
        }
        Image { data: out, ..*self }
    }

    /// Round trip through a real baseline JPEG codec at `quality` (1..=100).
    pub fn jpeg_roundtrip(&self, quality: u8) -> Result<Image> {
        let rgb = self.to_rgb8();
        let mut buf = Vec::new();
        JpegEncoder::new_with_quality(&mut buf, quality.clamp(1, 100)).encode_image(&rgb)?;
        let decoded = image::load_from_memory(&buf)?;
        Ok(Image::from_dynamic(&decoded))
    }

    pub fn to_rgb8(&self) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            if self.channels >= 3 {
                Rgb([q(self.get(x, y, 0)), q(self.get(x, y, 1)), q(self.get(x, y, 2))])
            } else {
                let g = q(self.get(x, y, 0));
                Rgb([g, g, g])
            }
        })
    }

    pub fn from_dynamic(img: &DynamicImage) -> Image {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Image {
            width: w as usize,
            height: h as usize,
            channels: 3,
            data,
        }
    }

    pub fn load(path: &Path) -> Result<Image> {
        let img = image::open(path)?;
        if img.width() == 0 || img.height() == 0 {
            return Err(Error::EmptyImage);
        }
        Ok(Image::from_dynamic(&img))
    }

    /// Saves as 8-bit RGB; format follows the file extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }

    /// Quantizes to 8 bits and back, matching what [`Image::save`] followed
    /// by [`Image::load`] yields for lossless formats.
    pub fn quantized(&self) -> Image {
        self.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
    }

    /// Circular shift by `(dx, dy)` pixels.
    pub fn roll(&self, dx: usize, dy: usize) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let (tx, ty) = ((x + dx) % self.width, (y + dy) % self.height);
                for c in 0..self.channels {
                    out.set(tx, ty, c, self.get(x, y, c));
                }
            }
        }
        out
    }
}

fn shape_err(a: &Image, b: &Image) -> Error {
    Error::ShapeMismatch {
        expected: format!("{:?}", a.shape()),
        got: format!("{:?}", b.shape()),
    }
}

/// For each output coordinate: the two source taps and the weight of the
/// second one.
fn axis_taps(input: usize, output: usize) -> Vec<(usize, usize, f32)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let half = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f32> = (-half..=half)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f32 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}
