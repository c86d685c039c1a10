//! Random training-set expansion on `[C, H, W]` float images.
//!
//! One augmented copy applies, in this order and each with probability ½:
//! Gaussian blur (σ ∈ [0.5, 1.5]), horizontal flip, vertical flip, integer
//! shift of up to ±10% per axis, and bilinear scaling by a factor in
//! [0.9, 1.1] about the centre; then a rotation by a uniform multiple of 90°
//! (multiples of 180° only for non-square images). Shift and scale replicate
//! edge pixels. Every copy draws the same number of random values whether
//! or not an op is enabled.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Size of the expanded set relative to the original; copy 0 of every
    /// image is the image itself.
    pub multiplier: usize,
    pub blur: bool,
    pub hflip: bool,
    pub vflip: bool,
    pub shift: bool,
    pub scale: bool,
    pub rot90: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { multiplier: 64, blur: true, hflip: true, vflip: true, shift: true, scale: true, rot90: true }
    }
}

impl AugmentConfig {
    pub fn identity(multiplier: usize) -> Self {
        Self { multiplier, blur: false, hflip: false, vflip: false, shift: false, scale: false, rot90: false }
    }
}

fn dims(img: &Tensor<f32>) -> (usize, usize, usize) {
    let s = img.shape();
    (s[0], s[1], s[2])
}

fn remap(img: &Tensor<f32>, oh: usize, ow: usize, f: impl Fn(usize, usize) -> (usize, usize)) -> Tensor<f32> {
    let (c, h, w) = dims(img);
    let src = img.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = f(y, x);
                out.push(src[(ch * h + sy) * w + sx]);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out).expect("remap shape")
}

pub fn hflip(img: &Tensor<f32>) -> Tensor<f32> {
    let (_, h, w) = dims(img);
    remap(img, h, w, |y, x| (y, w - 1 - x))
}

pub fn vflip(img: &Tensor<f32>) -> Tensor<f32> {
    let (_, h, w) = dims(img);
    remap(img, h, w, |y, x| (h - 1 - y, x))
}

/// Counter-clockwise rotation by 90°.
pub fn rot90(img: &Tensor<f32>) -> Tensor<f32> {
    let (_, h, w) = dims(img);
    remap(img, w, h, |y, x| (x, w - 1 - y))
}

pub fn shift(img: &Tensor<f32>, dy: isize, dx: isize) -> Tensor<f32> {
    let (_, h, w) = dims(img);
    remap(img, h, w, |y, x| {
        ((y as isize - dy).clamp(0, h as isize - 1) as usize, (x as isize - dx).clamp(0, w as isize - 1) as usize)
    })
}

pub fn scale(img: &Tensor<f32>, factor: f64) -> Tensor<f32> {
    let (c, h, w) = dims(img);
    let axis = |n: usize| -> Vec<(usize, usize, f64)> {
        let centre = n as f64 / 2.0;
        (0..n)
            .map(|d| {
                let s = ((d as f64 + 0.5 - centre) / factor + centre - 0.5).clamp(0.0, (n - 1) as f64);
                let lo = s.floor() as usize;
                (lo, (lo + 1).min(n - 1), s - lo as f64)
            })
            .collect()
    };
    let (ys, xs) = (axis(h), axis(w));
    let src = img.data();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let p = |y: usize, x: usize| src[(ch * h + y) * w + x] as f64;
        for &(y0, y1, wy) in &ys {
            for &(x0, x1, wx) in &xs {
                let top = p(y0, x0) * (1.0 - wx) + p(y0, x1) * wx;
                let bottom = p(y1, x0) * (1.0 - wx) + p(y1, x1) * wx;
                out.push((top * (1.0 - wy) + bottom * wy) as f32);
            }
        }
    }
    Tensor::new(vec![c, h, w], out).expect("scale shape")
}

/// Separable Gaussian blur with radius `⌈3σ⌉` and edge replication.
pub fn blur(img: &Tensor<f32>, sigma: f64) -> Tensor<f32> {
    let (c, h, w) = dims(img);
    let r = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = weights.iter().sum();
    let kernel: Vec<f64> = weights.iter().map(|v| v / norm).collect();
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (k, kw) in kernel.iter().enumerate() {
                        let o = k as isize - r;
                        let (sy, sx) = if horizontal {
                            (y, (x as isize + o).clamp(0, w as isize - 1) as usize)
                        } else {
                            ((y as isize + o).clamp(0, h as isize - 1) as usize, x)
                        };
                        acc += kw * src[(ch * h + sy) * w + sx];
                    }
                    out[(ch * h + y) * w + x] = acc;
                }
            }
        }
        out
    };
    let src: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    let out = pass(&pass(&src, true), false);
    Tensor::new(vec![c, h, w], out.into_iter().map(|v| v as f32).collect()).expect("blur shape")
}

/// One random composition of the enabled ops.
pub fn augment_one<R: Rng + ?Sized>(img: &Tensor<f32>, rng: &mut R, cfg: &AugmentConfig) -> Tensor<f32> {
    let (_, h, w) = dims(img);
    let coins: [bool; 5] = std::array::from_fn(|_| rng.random_bool(0.5));
    let sigma = rng.random_range(0.5..=1.5);
    let dy = (rng.random_range(-0.1..=0.1) * h as f64).round() as isize;
    let dx = (rng.random_range(-0.1..=0.1) * w as f64).round() as isize;
    let factor = rng.random_range(0.9..=1.1);
    let turns = rng.random_range(0..4usize);

    let mut out = img.clone();
    if cfg.blur && coins[0] {
        out = blur(&out, sigma);
    }
    if cfg.hflip && coins[1] {
        out = hflip(&out);
    }
    if cfg.vflip && coins[2] {
        out = vflip(&out);
    }
    if cfg.shift && coins[3] {
        out = shift(&out, dy, dx);
    }
    if cfg.scale && coins[4] {
        out = scale(&out, factor);
    }
    if cfg.rot90 {
        let turns = if h == w { turns } else { turns & !1 };
        for _ in 0..turns {
            out = rot90(&out);
        }
    }
    out
}

/// Copy `index` of the expanded set: the image itself for index 0, a
/// random composition otherwise.
pub fn augmented_copy<R: Rng + ?Sized>(
    img: &Tensor<f32>,
    index: usize,
    rng: &mut R,
    cfg: &AugmentConfig,
) -> Tensor<f32> {
    if index == 0 {
        img.clone()
    } else {
        augment_one(img, rng, cfg)
    }
}

/// All `multiplier` copies of one image, drawn from `rng` in order.
pub fn augment<R: Rng + ?Sized>(img: &Tensor<f32>, rng: &mut R, cfg: &AugmentConfig) -> Vec<Tensor<f32>> {
    (0..cfg.multiplier).map(|i| augmented_copy(img, i, rng, cfg)).collect()
}
