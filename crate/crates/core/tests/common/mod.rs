//! Reference implementations shared by the integration tests. Each one is
//! written directly from the definition, favouring obviousness over speed.

#![allow(dead_code)]

use mltr::data::pnm::ImageBuffer;

/// CLAHE computed pixel by pixel: for every output pixel the mappings of
/// the (up to) four neighbouring tiles are rebuilt from scratch by scanning
/// the tile, clipping its histogram, redistributing the excess and taking
/// the cumulative count at the pixel's value.
pub fn clahe_brute_force(img: &ImageBuffer, clip: f64, grid: [usize; 2]) -> Vec<u8> {
    let (w, h) = (img.width, img.height);
    let (gx, gy) = (grid[0].min(w), grid[1].min(h));
    let x_edges = |i: usize| (i * w / gx, (i + 1) * w / gx);
    let y_edges = |j: usize| (j * h / gy, (j + 1) * h / gy);

    let map = |tx: usize, ty: usize, v: u8| -> f64 {
        let (x0, x1) = x_edges(tx);
        let (y0, y1) = y_edges(ty);
        let area = ((x1 - x0) * (y1 - y0)) as u64;
        let mut count = vec![0u64; 256];
        for y in y0..y1 {
            for x in x0..x1 {
                count[img.data[y * w + x] as usize] += 1;
            }
        }
        if clip > 0.0 {
            let limit = std::cmp::max(1, (clip * area as f64 / 256.0) as u64);
            let excess: u64 = count.iter().map(|&c| c.saturating_sub(limit)).sum();
            let (each, rest) = (excess / 256, excess % 256);
            let stride = 256u64.checked_div(rest).map_or(1, |s| s.max(1));
            for (b, c) in count.iter_mut().enumerate() {
                *c = (*c).min(limit) + each;
                let b = b as u64;
                if rest > 0 && b.is_multiple_of(stride) && b / stride < rest {
                    *c += 1;
                }
            }
        }
        let cdf: u64 = count[..=v as usize].iter().sum();
        let mapped = (cdf as f64 * (255.0 / area as f64)).round();
        mapped.clamp(0.0, 255.0)
    };

    // Neighbouring tiles and the weight of the second one along an axis.
    let neighbours = |pos: f64, tiles: usize, edges: &dyn Fn(usize) -> (usize, usize)| -> (usize, usize, f64) {
        let centre = |i: usize| {
            let (a, b) = edges(i);
            (a + b) as f64 / 2.0
        };
        if pos <= centre(0) {
            return (0, 0, 0.0);
        }
        if pos >= centre(tiles - 1) {
            return (tiles - 1, tiles - 1, 0.0);
        }
        let mut i = 0;
        while centre(i + 1) <= pos {
            i += 1;
        }
        (i, i + 1, (pos - centre(i)) / (centre(i + 1) - centre(i)))
    };

    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let v = img.data[y * w + x];
            let (tx0, tx1, wx) = neighbours(x as f64 + 0.5, gx, &x_edges);
            let (ty0, ty1, wy) = neighbours(y as f64 + 0.5, gy, &y_edges);
            let top = map(tx0, ty0, v) * (1.0 - wx) + map(tx1, ty0, v) * wx;
            let bottom = map(tx0, ty1, v) * (1.0 - wx) + map(tx1, ty1, v) * wx;
            out.push((top * (1.0 - wy) + bottom * wy).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

/// Exact `round(255·(v/255)^1.2)` in integer arithmetic.
///
/// With γ = 6/5, `255·(v/255)^γ ≥ k − ½` is equivalent to
/// `32·v⁶ ≥ 255·(2k − 1)⁵`, so the rounded value is the largest `k` for
/// which that holds.
pub fn gamma_1_2_exact(v: u8) -> u8 {
    let lhs = 32u128 * (v as u128).pow(6);
    (1..=255u128).rev().find(|&k| lhs >= 255 * (2 * k - 1).pow(5)).unwrap_or(0) as u8
}

/// (true, predicted) pairs listed out from a confusion matrix.
pub fn samples(counts: &[Vec<u64>]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (t, row) in counts.iter().enumerate() {
        for (p, &c) in row.iter().enumerate() {
            out.extend(std::iter::repeat_n((t, p), c as usize));
        }
    }
    out
}

/// Quadratic weighted kappa from the sample list: observed mean weighted
/// disagreement over pairs (tᵢ, pᵢ), expected over all cross pairs (tᵢ, pⱼ).
pub fn kappa_brute_force(counts: &[Vec<u64>]) -> f64 {
    let k = counts.len();
    let weight = |a: usize, b: usize| {
        let d = a as f64 - b as f64;
        d * d / ((k - 1) * (k - 1)) as f64
    };
    let s = samples(counts);
    let n = s.len() as f64;
    let observed: f64 = s.iter().map(|&(t, p)| weight(t, p)).sum::<f64>() / n;
    let mut expected = 0.0;
    for &(t, _) in &s {
        for &(_, p) in &s {
            expected += weight(t, p);
        }
    }
    expected /= n * n;
    1.0 - observed / expected
}

pub fn accuracy_brute_force(counts: &[Vec<u64>]) -> f64 {
    let s = samples(counts);
    s.iter().filter(|(t, p)| t == p).count() as f64 / s.len() as f64
}

/// Mean over classes of `2·TP / (2·TP + FP + FN)`, zero for a class that
/// is neither present nor predicted.
pub fn macro_f1_brute_force(counts: &[Vec<u64>]) -> f64 {
    let k = counts.len();
    let s = samples(counts);
    let mut total = 0.0;
    for c in 0..k {
        let tp = s.iter().filter(|&&(t, p)| t == c && p == c).count() as f64;
        let fp = s.iter().filter(|&&(t, p)| t != c && p == c).count() as f64;
        let fn_ = s.iter().filter(|&&(t, p)| t == c && p != c).count() as f64;
        if tp > 0.0 {
            total += 2.0 * tp / (2.0 * tp + fp + fn_);
        }
    }
    total / k as f64
}

/// Random `k × k` confusion matrix with exactly `total` samples.
pub fn random_counts<R: rand::Rng>(rng: &mut R, k: usize, total: u64) -> Vec<Vec<u64>> {
    let mut counts = vec![vec![0u64; k]; k];
    for _ in 0..total {
        counts[rng.random_range(0..k)][rng.random_range(0..k)] += 1;
    }
    counts
}

pub fn random_gray<R: rand::Rng>(rng: &mut R, w: usize, h: usize) -> ImageBuffer {
    ImageBuffer::gray(w, h, (0..w * h).map(|_| rng.random()).collect()).unwrap()
}
