//! Dense row-major tensors in `(y, x, c)` order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Shape3};

/// Rank-3 feature map. Element `(y, x, c)` lives at `(y * w + x) * c_count + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self::filled(h, w, c, 0.0)
    }

    pub fn filled(h: usize, w: usize, c: usize, value: f64) -> Self {
        Tensor3 {
            h,
            w,
            c,
            data: vec![value; h * w * c],
        }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::invalid("tensor3", format!("zero dimension {h}x{w}x{c}")));
        }
        if data.len() != h * w * c {
            return Err(Error::invalid(
                "tensor3",
                format!("{h}x{w}x{c} needs {} values, got {}", h * w * c, data.len()),
            ));
        }
        Ok(Tensor3 { h, w, c, data })
    }

    pub fn from_fn(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        Tensor3 { h, w, c, data }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn random<R: Rng + ?Sized>(h: usize, w: usize, c: usize, lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(h, w, c, |_, _, _| rng.gen_range(lo..hi))
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn shape(&self) -> Shape3 {
        Shape3 {
            h: self.h,
            w: self.w,
            c: self.c,
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        debug_assert!(y < self.h && x < self.w && c < self.c);
        (y * self.w + x) * self.c + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    /// Channel vector at one spatial location.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let start = (y * self.w + x) * self.c;
        &self.data[start..start + self.c]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let start = (y * self.w + x) * self.c;
        &mut self.data[start..start + self.c]
    }

    pub fn same_shape(&self, other: &Tensor3) -> bool {
        self.shape() == other.shape()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor3 {
        Tensor3 {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Extracts one channel as a map.
    pub fn channel(&self, c: usize) -> Tensor2 {
        let data = (0..self.h * self.w).map(|i| self.data[i * self.c + c]).collect();
        Tensor2 {
            h: self.h,
            w: self.w,
            data,
        }
    }

    /// Copies the `h x w` window whose top-left corner is `(y0, x0)`.
    pub fn window(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor3> {
        if y0 + h > self.h || x0 + w > self.w {
            return Err(Error::invalid(
                "window",
                format!("{h}x{w} at ({y0},{x0}) exceeds {}", self.shape()),
            ));
        }
        Ok(Tensor3::from_fn(h, w, self.c, |y, x, c| self.get(y0 + y, x0 + x, c)))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor3) -> f64 {
        assert!(self.same_shape(other), "max_abs_diff on {} vs {}", self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_tensor2(&self) -> Result<Tensor2> {
        if self.c != 1 {
            return Err(Error::invalid("to_tensor2", format!("expected one channel, got {}", self.shape())));
        }
        Ok(Tensor2 {
            h: self.h,
            w: self.w,
            data: self.data.clone(),
        })
    }
}

/// Single-channel map (heatmaps, labels, windows).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2 {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self::filled(h, w, 0.0)
    }

    pub fn filled(h: usize, w: usize, value: f64) -> Self {
        Tensor2 {
            h,
            w,
            data: vec![value; h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::invalid("tensor2", format!("zero dimension {h}x{w}")));
        }
        if data.len() != h * w {
            return Err(Error::invalid(
                "tensor2",
                format!("{h}x{w} needs {} values, got {}", h * w, data.len()),
            ));
        }
        Ok(Tensor2 { h, w, data })
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x));
            }
        }
        Tensor2 { h, w, data }
    }

    pub fn random<R: Rng + ?Sized>(h: usize, w: usize, lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(h, w, |_, _| rng.gen_range(lo..hi))
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> Shape3 {
        Shape3 {
            h: self.h,
            w: self.w,
            c: 1,
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        debug_assert!(y < self.h && x < self.w);
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        debug_assert!(y < self.h && x < self.w);
        self.data[y * self.w + x] = v;
    }

    pub fn same_shape(&self, other: &Tensor2) -> bool {
        self.h == other.h && self.w == other.w
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor2 {
        Tensor2 {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Element-wise combination of two equally shaped maps.
    pub fn zip_map(&self, other: &Tensor2, f: impl Fn(f64, f64) -> f64) -> Result<Tensor2> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch {
                op: "zip_map",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(Tensor2 {
            h: self.h,
            w: self.w,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Global maximum; ties resolve to the smaller row-major index.
    pub fn argmax(&self) -> PeakLocation {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        PeakLocation {
            y: best / self.w,
            x: best % self.w,
            score: self.data[best],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor2) -> f64 {
        assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_tensor3(&self) -> Tensor3 {
        Tensor3 {
            h: self.h,
            w: self.w,
            c: 1,
            data: self.data.clone(),
        }
    }
}

/// Convolution weights laid out `[out][in][ky][kx]`, plus one bias per output channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelBank {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl KernelBank {
    pub fn zeros(out_channels: usize, in_channels: usize, kh: usize, kw: usize) -> Self {
        KernelBank {
            out_channels,
            in_channels,
            kh,
            kw,
            weights: vec![0.0; out_channels * in_channels * kh * kw],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if out_channels == 0 || in_channels == 0 || kh == 0 || kw == 0 {
            return Err(Error::invalid("kernel_bank", "zero dimension"));
        }
        if weights.len() != out_channels * in_channels * kh * kw {
            return Err(Error::invalid(
                "kernel_bank",
                format!(
                    "{out_channels}x{in_channels}x{kh}x{kw} needs {} weights, got {}",
                    out_channels * in_channels * kh * kw,
                    weights.len()
                ),
            ));
        }
        if bias.len() != out_channels {
            return Err(Error::invalid(
                "kernel_bank",
                format!("expected {out_channels} biases, got {}", bias.len()),
            ));
        }
        Ok(KernelBank {
            out_channels,
            in_channels,
            kh,
            kw,
            weights,
            bias,
        })
    }

    /// 1x1 identity mapping on `channels` channels.
    pub fn identity(channels: usize) -> Self {
        let mut bank = KernelBank::zeros(channels, channels, 1, 1);
        for c in 0..channels {
            bank.weights[c * channels + c] = 1.0;
        }
        bank
    }

    /// He-style uniform initialisation scaled by fan-in, zero bias.
    pub fn random<R: Rng + ?Sized>(
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kh * kw) as f64;
        let bound = gain * (6.0 / fan_in).sqrt();
        let mut bank = KernelBank::zeros(out_channels, in_channels, kh, kw);
        for w in bank.weights.iter_mut() {
            *w = rng.gen_range(-bound..bound);
        }
        bank
    }

    #[inline]
    pub fn weight_index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + i) * self.kh + ky) * self.kw + kx
    }

    #[inline]
    pub fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weights[self.weight_index(o, i, ky, kx)]
    }

    pub fn zeros_like(&self) -> Self {
        KernelBank::zeros(self.out_channels, self.in_channels, self.kh, self.kw)
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

/// Grid coordinate of a map element together with its value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakLocation {
    pub y: usize,
    pub x: usize,
    pub score: f64,
}

impl PeakLocation {
    pub fn new(y: usize, x: usize, score: f64) -> Self {
        PeakLocation { y, x, score }
    }

    pub fn same_cell(&self, other: &PeakLocation) -> bool {
        self.y == other.y && self.x == other.x
    }
}
