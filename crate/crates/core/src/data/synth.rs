//! Deterministic synthetic four-class corpus.
//!
//! Every image is a smooth gradient field with a low-frequency ripple, with
//! pixel values well above zero. Severity adds features cumulatively:
//! class 1 small bright spots, class 2 also broad dark stains, class 3 also
//! black rectangular defects. All parameters are jittered per image.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{apportion, DatasetManifest, Entry, Split, CLASSES, MANIFEST_FILE};
use super::pnm::{self, ImageBuffer};
use crate::error::{Error, Result};
use crate::rng::{self, streams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_per_class: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Fraction of each class tagged as training data.
    #[serde(default = "default_ratio")]
    pub split_ratio: f64,
}

fn default_ratio() -> f64 {
    0.7
}

fn background(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Vec<f64> {
    let base = rng.random_range(110.0..160.0);
    let gx = rng.random_range(-30.0..30.0);
    let gy = rng.random_range(-30.0..30.0);
    let amp = rng.random_range(5.0..15.0);
    let fx = rng.random_range(0.5..2.0);
    let fy = rng.random_range(0.5..2.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
            let ripple = (std::f64::consts::TAU * (fx * u + fy * v) + phase).sin();
            out.push(base + gx * (u - 0.5) + gy * (v - 0.5) + amp * ripple);
        }
    }
    out
}

fn spots(rng: &mut ChaCha8Rng, px: &mut [f64], w: usize, h: usize) {
    let unit = (w.min(h) as f64 / 64.0).max(1.0);
    for _ in 0..rng.random_range(4..=8) {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let r = rng.random_range(1.0..2.0) * unit;
        let value = rng.random_range(245.0..=255.0);
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= r * r {
                    px[y * w + x] = value;
                }
            }
        }
    }
}

fn stains(rng: &mut ChaCha8Rng, px: &mut [f64], w: usize, h: usize) {
    for _ in 0..rng.random_range(2..=3) {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let sigma = rng.random_range(0.1..0.2) * w.min(h) as f64;
        let depth = rng.random_range(0.4..0.6);
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                px[y * w + x] *= 1.0 - depth * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            }
        }
    }
}

fn defects(rng: &mut ChaCha8Rng, px: &mut [f64], w: usize, h: usize) {
    for _ in 0..rng.random_range(1..=3) {
        let rw = ((rng.random_range(0.1..0.25) * w as f64) as usize).max(1);
        let rh = ((rng.random_range(0.1..0.25) * h as f64) as usize).max(1);
        let x0 = rng.random_range(0..=w - rw);
        let y0 = rng.random_range(0..=h - rh);
        for y in y0..y0 + rh {
            px[y * w + x0..y * w + x0 + rw].fill(0.0);
        }
    }
}

/// One image of `class`, fully determined by `(seed, class, index)`.
pub fn synth_image(seed: u64, class: usize, index: usize, width: usize, height: usize) -> ImageBuffer {
    let mut rng = rng::stream(seed, &[streams::SYNTH, class as u64, index as u64]);
    let mut px = background(&mut rng, width, height);
    if class >= 1 {
        spots(&mut rng, &mut px, width, height);
    }
    if class >= 2 {
        stains(&mut rng, &mut px, width, height);
    }
    if class >= 3 {
        defects(&mut rng, &mut px, width, height);
    }
    let data = px.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    ImageBuffer { width, height, channels: 1, data }
}

pub fn file_name(class: usize, index: usize) -> String {
    format!("{}/{}_{index:03}.pgm", CLASSES[class], CLASSES[class])
}

/// Generates the corpus in memory with its manifest. Images are ordered
/// like the manifest entries.
pub fn synth_generate(spec: &SynthSpec) -> Result<(DatasetManifest, Vec<ImageBuffer>)> {
    if spec.n_per_class < 2 {
        return Err(Error::Config(format!("n_per_class must be at least 2, got {}", spec.n_per_class)));
    }
    if spec.width < 8 || spec.height < 8 {
        return Err(Error::Config("synthetic images must be at least 8x8".into()));
    }
    if !(spec.split_ratio > 0.0 && spec.split_ratio <= 1.0) {
        return Err(Error::Config(format!("split ratio {} outside (0, 1]", spec.split_ratio)));
    }
    let train = apportion(&[spec.n_per_class; 4], spec.split_ratio);
    let mut entries = Vec::new();
    let mut images = Vec::new();
    for (class, &n_train) in train.iter().enumerate() {
        for i in 0..spec.n_per_class {
            let split = if i < n_train { Split::Train } else { Split::Test };
            entries.push(Entry { path: file_name(class, i), class, split });
            images.push(synth_image(spec.seed, class, i, spec.width, spec.height));
        }
    }
    Ok((DatasetManifest { seed: spec.seed, split_ratio: spec.split_ratio, entries }, images))
}

/// Writes the corpus under `out` as PGM files plus `manifest.json`.
pub fn write_corpus(out: &Path, spec: &SynthSpec) -> Result<DatasetManifest> {
    let (manifest, images) = synth_generate(spec)?;
    for class in CLASSES {
        std::fs::create_dir_all(out.join(class))?;
    }
    for (entry, img) in manifest.entries.iter().zip(&images) {
        pnm::write(&super::manifest::resolve(out, entry), img)?;
    }
    std::fs::write(out.join(MANIFEST_FILE), manifest.to_json()?)?;
    Ok(manifest)
}
