//! Image preprocessing: bilinear resize, grayscale, min-max stretch, CLAHE
//! and gamma correction, all on 8-bit samples.

use serde::{Deserialize, Serialize};

use super::pnm::ImageBuffer;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub gamma: f64,
    /// Clip limit as a multiple of the mean bin height; `<= 0` disables
    /// clipping.
    pub clahe_clip: f64,
    /// Tile grid as `[columns, rows]`.
    pub clahe_tiles: [usize; 2],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { gamma: 1.2, clahe_clip: 2.0, clahe_tiles: [8, 8] }
    }
}

fn round_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Bilinear resize with pixel-centre alignment and edge clamping.
pub fn resize_bilinear(img: &ImageBuffer, width: usize, height: usize) -> ImageBuffer {
    if img.width == width && img.height == height {
        return img.clone();
    }
    let axis = |dst: usize, src: usize| -> Vec<(usize, usize, f64)> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|d| {
                let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let lo = s.floor() as usize;
                (lo, (lo + 1).min(src - 1), s - lo as f64)
            })
            .collect()
    };
    let xs = axis(width, img.width);
    let ys = axis(height, img.height);
    let c = img.channels;
    let mut data = Vec::with_capacity(width * height * c);
    for &(y0, y1, wy) in &ys {
        for &(x0, x1, wx) in &xs {
            for ch in 0..c {
                let p = |x, y| img.get(x, y, ch) as f64;
                let top = p(x0, y0) * (1.0 - wx) + p(x1, y0) * wx;
                let bottom = p(x0, y1) * (1.0 - wx) + p(x1, y1) * wx;
                data.push(round_u8(top * (1.0 - wy) + bottom * wy));
            }
        }
    }
    ImageBuffer { width, height, channels: c, data }
}

/// Luma `0.299R + 0.587G + 0.114B`, rounded. Gray input passes through.
pub fn grayscale(img: &ImageBuffer) -> ImageBuffer {
    if img.channels == 1 {
        return img.clone();
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| round_u8(0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64))
        .collect();
    ImageBuffer { width: img.width, height: img.height, channels: 1, data }
}

/// Stretches a gray image to span `[0, 255]` with round-half-up. A constant
/// image is returned unchanged.
pub fn minmax(img: &ImageBuffer) -> ImageBuffer {
    let lo = *img.data.iter().min().unwrap_or(&0) as u32;
    let hi = *img.data.iter().max().unwrap_or(&0) as u32;
    if lo == hi {
        return img.clone();
    }
    let range = hi - lo;
    let data = img.data.iter().map(|&v| ((2 * 255 * (v as u32 - lo) + range) / (2 * range)) as u8).collect();
    ImageBuffer { data, ..img.clone() }
}

/// Tile boundaries `[i·n/t, (i+1)·n/t)` along one axis.
pub fn tile_bounds(n: usize, tiles: usize) -> Vec<(usize, usize)> {
    (0..tiles).map(|i| (i * n / tiles, (i + 1) * n / tiles)).collect()
}

/// Clipped, redistributed histogram mapping of one tile.
///
/// The clip limit is `max(1, ⌊clip·area/256⌋)`. The clipped excess is
/// spread evenly over all bins and the remainder one count per bin at a
/// stride of `max(1, 256 / remainder)` starting at bin 0. The mapping is
/// `round(cdf·255/area)`.
pub fn tile_lut(pixels: impl Iterator<Item = u8>, clip: f64) -> [u8; 256] {
    let mut hist = [0u64; 256];
    let mut area = 0u64;
    for p in pixels {
        hist[p as usize] += 1;
        area += 1;
    }
    if clip > 0.0 {
        let limit = ((clip * area as f64 / 256.0) as u64).max(1);
        let mut excess = 0;
        for h in hist.iter_mut() {
            if *h > limit {
                excess += *h - limit;
                *h = limit;
            }
        }
        let each = excess / 256;
        let rest = excess % 256;
        for h in hist.iter_mut() {
            *h += each;
        }
        if let Some(stride) = 256u64.checked_div(rest) {
            for h in hist.iter_mut().step_by(stride.max(1) as usize).take(rest as usize) {
                *h += 1;
            }
        }
    }
    let mut lut = [0u8; 256];
    let mut cdf = 0u64;
    let scale = 255.0 / area.max(1) as f64;
    for (v, h) in hist.iter().enumerate() {
        cdf += h;
        lut[v] = round_u8(cdf as f64 * scale);
    }
    lut
}

/// For each pixel centre, the two neighbouring tile indices and the weight
/// of the second.
fn interp_axis(n: usize, bounds: &[(usize, usize)]) -> Vec<(usize, usize, f64)> {
    let centres: Vec<f64> = bounds.iter().map(|&(a, b)| (a + b) as f64 / 2.0).collect();
    let last = centres.len() - 1;
    (0..n)
        .map(|i| {
            let pos = i as f64 + 0.5;
            if pos <= centres[0] {
                (0, 0, 0.0)
            } else if pos >= centres[last] {
                (last, last, 0.0)
            } else {
                let t = centres.iter().rposition(|&c| c <= pos).expect("pos above first centre");
                (t, t + 1, (pos - centres[t]) / (centres[t + 1] - centres[t]))
            }
        })
        .collect()
}

/// Contrast-limited adaptive histogram equalization of a gray image with
/// bilinear blending between the four nearest tile mappings. The grid is
/// reduced to at most one tile per pixel along each axis.
pub fn clahe(img: &ImageBuffer, clip: f64, tiles: [usize; 2]) -> Result<ImageBuffer> {
    if img.channels != 1 {
        return Err(Error::Shape("CLAHE expects a gray image".into()));
    }
    if tiles[0] == 0 || tiles[1] == 0 {
        return Err(Error::Config("CLAHE tile grid must be non-empty".into()));
    }
    let (w, h) = (img.width, img.height);
    let bx = tile_bounds(w, tiles[0].min(w));
    let by = tile_bounds(h, tiles[1].min(h));
    let luts: Vec<Vec<[u8; 256]>> = by
        .iter()
        .map(|&(y0, y1)| {
            bx.iter()
                .map(|&(x0, x1)| tile_lut((y0..y1).flat_map(|y| (x0..x1).map(move |x| img.data[y * w + x])), clip))
                .collect()
        })
        .collect();
    let ix = interp_axis(w, &bx);
    let iy = interp_axis(h, &by);
    let mut data = Vec::with_capacity(w * h);
    for (y, &(ty0, ty1, wy)) in iy.iter().enumerate() {
        for (x, &(tx0, tx1, wx)) in ix.iter().enumerate() {
            let v = img.data[y * w + x] as usize;
            let m = |ty: usize, tx: usize| luts[ty][tx][v] as f64;
            let top = m(ty0, tx0) * (1.0 - wx) + m(ty0, tx1) * wx;
            let bottom = m(ty1, tx0) * (1.0 - wx) + m(ty1, tx1) * wx;
            data.push(round_u8(top * (1.0 - wy) + bottom * wy));
        }
    }
    Ok(ImageBuffer { data, ..img.clone() })
}

/// `round(255·(v/255)^γ)` for every 8-bit value.
pub fn gamma_lut(gamma: f64) -> [u8; 256] {
    let mut lut = [0u8; 256];
    for (v, out) in lut.iter_mut().enumerate() {
        *out = round_u8(255.0 * (v as f64 / 255.0).powf(gamma));
    }
    lut
}

pub fn gamma(img: &ImageBuffer, gamma: f64) -> ImageBuffer {
    let lut = gamma_lut(gamma);
    ImageBuffer { data: img.data.iter().map(|&v| lut[v as usize]).collect(), ..img.clone() }
}

/// Resize, grayscale, min-max stretch, CLAHE and gamma, in that order.
pub fn preprocess_u8(img: &ImageBuffer, width: usize, height: usize, cfg: &PreprocessConfig) -> Result<ImageBuffer> {
    let img = grayscale(&resize_bilinear(img, width, height));
    let img = clahe(&minmax(&img), cfg.clahe_clip, cfg.clahe_tiles)?;
    Ok(gamma(&img, cfg.gamma))
}

/// 8-bit gray image as a `[1, H, W]` tensor in `[0, 1]`.
pub fn to_tensor(img: &ImageBuffer) -> Result<Tensor<f32>> {
    if img.channels != 1 {
        return Err(Error::Shape("expected a gray image".into()));
    }
    Tensor::new(vec![1, img.height, img.width], img.data.iter().map(|&v| v as f32 / 255.0).collect())
}

pub fn preprocess(img: &ImageBuffer, width: usize, height: usize, cfg: &PreprocessConfig) -> Result<Tensor<f32>> {
    to_tensor(&preprocess_u8(img, width, height, cfg)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_stays_constant() {
        let img = ImageBuffer::filled(20, 12, 3, 90);
        let out = preprocess_u8(&img, 16, 16, &PreprocessConfig::default()).unwrap();
        assert_eq!((out.width, out.height, out.channels), (16, 16, 1));
        assert!(out.data.iter().all(|&v| v == out.data[0]));
        let resized = resize_bilinear(&img, 7, 31);
        assert!(resized.data.iter().all(|&v| v == 90));
    }

    #[test]
    fn gamma_at_128() {
        assert_eq!(gamma_lut(1.2)[128], 112);
        assert_eq!(gamma_lut(1.2)[0], 0);
        assert_eq!(gamma_lut(1.2)[255], 255);
    }

    #[test]
    fn minmax_stretches_to_full_range() {
        let img = ImageBuffer::gray(3, 1, vec![10, 20, 30]).unwrap();
        assert_eq!(minmax(&img).data, [0, 128, 255]);
    }

    #[test]
    fn grayscale_weights() {
        let img = ImageBuffer::new(2, 1, 3, vec![255, 0, 0, 10, 200, 40]).unwrap();
        assert_eq!(grayscale(&img).data, [76, 125]);
    }

    #[test]
    fn clahe_without_clipping_on_one_tile_is_global_equalization() {
        let img = ImageBuffer::gray(4, 1, vec![0, 0, 100, 200]).unwrap();
        let out = clahe(&img, 0.0, [1, 1]).unwrap();
        assert_eq!(out.data, [128, 128, 191, 255]);
    }
}
