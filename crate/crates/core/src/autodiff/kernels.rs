//! Raw slice kernels shared by the forward and backward passes.

use crate::tensor::Real;

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_bt_acc<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_at_acc<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Softmax over `len` contiguous-or-strided elements. `outer × len × inner`
/// layout, reduction along the middle axis.
pub fn softmax<F: Real>(x: &[F], out: &mut [F], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = F::neg_infinity();
            for t in 0..len {
                max = max.max(x[base + t * inner]);
            }
            let mut sum = F::zero();
            for t in 0..len {
                let e = (x[base + t * inner] - max).exp();
                out[base + t * inner] = e;
                sum += e;
            }
            let inv = F::one() / sum;
            for t in 0..len {
                out[base + t * inner] *= inv;
            }
        }
    }
}

pub fn gelu<F: Real>(x: F) -> F {
    let half = F::from_f64_lossy(0.5);
    let inv_sqrt2 = F::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
    half * x * (F::one() + (x * inv_sqrt2).erf())
}

/// d/dx of exact GELU: Φ(x) + x·φ(x).
pub fn gelu_grad<F: Real>(x: F) -> F {
    let half = F::from_f64_lossy(0.5);
    let inv_sqrt2 = F::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = F::from_f64_lossy(0.398_942_280_401_432_7);
    let cdf = half * (F::one() + (x * inv_sqrt2).erf());
    let pdf = inv_sqrt_2pi * (-half * x * x).exp();
    cdf + x * pdf
}

/// Unfold `x[cin×h×w]` into `cols[(cin·k·k) × (oh·ow)]`.
#[allow(clippy::too_many_arguments)]
pub fn im2col<F: Real>(
    x: &[F],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<F> {
    let mut cols = vec![F::zero(); cin * k * k * oh * ow];
    let npos = oh * ow;
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * npos..(row + 1) * npos];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image gradient.
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc<F: Real>(
    cols: &[F],
    dx: &mut [F],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let npos = oh * ow;
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * npos..(row + 1) * npos];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (c * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// PyTorch-style adaptive pooling bin `[start, end)` for output index `i`.
pub fn pool_bin(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = (i * input) / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}
