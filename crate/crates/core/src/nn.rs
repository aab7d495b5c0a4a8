//! Minimal layers with hand-written backward passes.
//!
//! Convolutions run in `f32` via im2col + GEMM; the small fusion layers run in
//! `f64` so finite-difference checks stay meaningful.

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::weights::{F32Blob, F64Blob};

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `(out_channels, in_channels * kernel * kernel)`
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl Conv2d {
    /// He-normal initialised convolution.
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f32;
        let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).unwrap();
        let weight = Array2::from_shape_fn((out_channels, in_channels * kernel * kernel), |_| {
            normal.sample(rng)
        });
        Self {
            weight,
            bias: Array1::zeros(out_channels),
            in_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (h, w) = (h + 2 * self.pad, w + 2 * self.pad);
        if h < self.kernel || w < self.kernel {
            return None;
        }
        Some(((h - self.kernel) / self.stride + 1, (w - self.kernel) / self.stride + 1))
    }

    /// Returns the output `(C, H, W)` and the im2col matrix needed by
    /// [`Conv2d::backward`]. Panics if the input is smaller than the kernel;
    /// callers validate shapes first.
    pub fn forward(&self, input: &Array3<f32>) -> (Array3<f32>, Array2<f32>) {
        let (_, h, w) = input.dim();
        let (oh, ow) = self.output_hw(h, w).expect("input smaller than kernel");
        let cols = im2col(input, self.kernel, self.stride, self.pad, oh, ow);
        let mut out = self.weight.dot(&cols);
        for (mut row, &b) in out.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            row += b;
        }
        let out = out
            .into_shape_with_order((self.out_channels(), oh, ow))
            .expect("conv output reshape");
        (out, cols)
    }

    pub fn zero_grads(&self) -> ConvGrads {
        ConvGrads {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
        }
    }

    /// Accumulates parameter gradients into `grads` and, when `input_hw` is
    /// given, returns the gradient with respect to the input.
    pub fn backward(
        &self,
        cols: &Array2<f32>,
        grad_out: &Array3<f32>,
        grads: &mut ConvGrads,
        input_hw: Option<(usize, usize)>,
    ) -> Option<Array3<f32>> {
        let (oc, oh, ow) = grad_out.dim();
        let g = grad_out
            .view()
            .into_shape_with_order((oc, oh * ow))
            .expect("grad reshape");
        grads.weight += &g.dot(&cols.t());
        grads.bias += &g.sum_axis(Axis(1));
        input_hw.map(|(h, w)| {
            let dcols = self.weight.t().dot(&g);
            col2im(&dcols, self.in_channels, h, w, self.kernel, self.stride, self.pad, oh, ow)
        })
    }
}

fn im2col(
    input: &Array3<f32>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f32> {
    let (c, h, w) = input.dim();
    let mut cols = Array2::<f32>::zeros((c * k * k, oh * ow));
    let src = input.as_standard_layout();
    let src = src.as_slice().unwrap();
    let dst = cols.as_slice_mut().unwrap();
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let out_row = &mut dst[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_row = &src[(ch * h + iy as usize) * w..(ch * h + iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            out_row[oy * ow + ox] = in_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &Array2<f32>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array3<f32> {
    let mut out = Array3::<f32>::zeros((c, h, w));
    let src = cols.as_standard_layout();
    let src = src.as_slice().unwrap();
    let dst = out.as_slice_mut().unwrap();
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let col_row = &src[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ch * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[base + ix as usize] += col_row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn relu_inplace(x: &mut Array3<f32>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes `grad` where the forward activation was clamped by ReLU.
pub fn relu_backward(grad: &mut Array3<f32>, activation: &Array3<f32>) {
    ndarray::Zip::from(grad).and(activation).for_each(|g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Dense layer `y = W x + b` in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `(out, in)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    /// Normal initialisation with the given standard deviation.
    pub fn new<R: Rng>(inputs: usize, outputs: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).unwrap();
        Self {
            weight: Array2::from_shape_fn((outputs, inputs), |_| normal.sample(rng)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.weight.dot(&x) + &self.bias
    }

    pub fn zero_grads(&self) -> LinearGrads {
        LinearGrads {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
        }
    }

    /// Accumulates `dL/dW`, `dL/db` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView1<f64>, grad_out: ArrayView1<f64>, grads: &mut LinearGrads) -> Array1<f64> {
        for (mut row, &g) in grads.weight.axis_iter_mut(Axis(0)).zip(grad_out.iter()) {
            row.scaled_add(g, &x);
        }
        grads.bias += &grad_out;
        self.weight.t().dot(&grad_out)
    }
}

/// Serialized form of a [`Linear`] layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearState {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: F64Blob,
    pub bias: F64Blob,
}

impl From<&Linear> for LinearState {
    fn from(l: &Linear) -> Self {
        Self {
            inputs: l.inputs(),
            outputs: l.outputs(),
            weight: F64Blob::from_slice(l.weight.as_standard_layout().as_slice().unwrap()),
            bias: F64Blob::from_slice(l.bias.as_slice().unwrap()),
        }
    }
}

impl LinearState {
    pub fn restore(&self) -> Result<Linear, String> {
        let w = self.weight.decode()?;
        let b = self.bias.decode()?;
        if w.len() != self.inputs * self.outputs || b.len() != self.outputs {
            return Err("linear layer size mismatch".into());
        }
        Ok(Linear {
            weight: Array2::from_shape_vec((self.outputs, self.inputs), w).map_err(|e| e.to_string())?,
            bias: Array1::from(b),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvState {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: F32Blob,
    pub bias: F32Blob,
}

impl From<&Conv2d> for ConvState {
    fn from(c: &Conv2d) -> Self {
        Self {
            in_channels: c.in_channels,
            out_channels: c.out_channels(),
            kernel: c.kernel,
            stride: c.stride,
            pad: c.pad,
            weight: F32Blob::from_slice(c.weight.as_standard_layout().as_slice().unwrap()),
            bias: F32Blob::from_slice(c.bias.as_slice().unwrap()),
        }
    }
}

impl ConvState {
    pub fn restore(&self) -> Result<Conv2d, String> {
        let w = self.weight.decode()?;
        let b = self.bias.decode()?;
        let cols = self.in_channels * self.kernel * self.kernel;
        if w.len() != self.out_channels * cols || b.len() != self.out_channels || self.stride == 0 {
            return Err("conv layer size mismatch".into());
        }
        Ok(Conv2d {
            weight: Array2::from_shape_vec((self.out_channels, cols), w).map_err(|e| e.to_string())?,
            bias: Array1::from(b),
            in_channels: self.in_channels,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        })
    }
}

/// Adam hyper-parameters plus the shared step counter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
        }
    }

    /// Advances the step counter; call once per optimizer step, before the
    /// per-tensor [`Adam::update`] calls.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update<F: Float>(&self, param: &mut [F], grad: &[F], state: &mut Moments<F>) {
        debug_assert_eq!(param.len(), grad.len());
        if state.m.len() != param.len() {
            state.m = vec![F::zero(); param.len()];
            state.v = vec![F::zero(); param.len()];
        }
        let t = self.step.max(1) as i32;
        let b1 = F::from(self.beta1).unwrap();
        let b2 = F::from(self.beta2).unwrap();
        let one = F::one();
        let c1 = one - b1.powi(t);
        let c2 = one - b2.powi(t);
        let lr = F::from(self.lr).unwrap();
        let eps = F::from(self.eps).unwrap();
        for i in 0..param.len() {
            let g = grad[i];
            state.m[i] = b1 * state.m[i] + (one - b1) * g;
            state.v[i] = b2 * state.v[i] + (one - b2) * g * g;
            let m_hat = state.m[i] / c1;
            let v_hat = state.v[i] / c2;
            param[i] = param[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Moments<F> {
    m: Vec<F>,
    v: Vec<F>,
}
