//! Patchification and random-ratio masking plans.
//!
//! Patch rows are flattened channel-major, then row-major within the patch:
//! element `(c, dy, dx)` of patch `k` sits at column `c·P² + dy·P + dx`.
//! Patches are numbered row-major over the patch grid.

use std::cell::Cell;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

thread_local! {
    static PLANS_BUILT: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`MaskPlan`]s constructed on the current thread. Used to
/// confirm that inference never masks.
pub fn plans_built() -> u64 {
    PLANS_BUILT.with(Cell::get)
}

/// Flattened patches of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid<F: Real = f32> {
    pub patch: usize,
    pub count: usize,
    pub tokens: Tensor<F>,
}

/// Flat source index (into `C×H×W`) for each element of the `N×(P²·C)`
/// patch matrix.
pub fn patch_index_map(c: usize, h: usize, w: usize, p: usize) -> Result<Vec<usize>> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return shape_err(format!("patch size {p} must divide image size {h}x{w}"));
    }
    let (gh, gw) = (h / p, w / p);
    let mut map = Vec::with_capacity(c * h * w);
    for gy in 0..gh {
        for gx in 0..gw {
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        map.push((ch * h + gy * p + dy) * w + gx * p + dx);
                    }
                }
            }
        }
    }
    Ok(map)
}

/// Inverse of [`patch_index_map`]: for each image element, its flat position
/// in the patch matrix.
pub fn unpatch_index_map(c: usize, h: usize, w: usize, p: usize) -> Result<Vec<usize>> {
    let forward = patch_index_map(c, h, w, p)?;
    let mut inv = vec![0; forward.len()];
    for (patch_pos, &img_pos) in forward.iter().enumerate() {
        inv[img_pos] = patch_pos;
    }
    Ok(inv)
}

pub fn patchify<F: Real>(x: &Tensor<F>, p: usize) -> Result<PatchGrid<F>> {
    let (c, h, w) = match x.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return shape_err(format!("patchify expects [C, H, W], got {s:?}")),
    };
    let map = patch_index_map(c, h, w, p)?;
    let count = (h / p) * (w / p);
    let data = map.iter().map(|&i| x.data()[i]).collect();
    Ok(PatchGrid { patch: p, count, tokens: Tensor::new(vec![count, p * p * c], data)? })
}

pub fn unpatchify<F: Real>(g: &PatchGrid<F>, h: usize, w: usize, c: usize) -> Result<Tensor<F>> {
    let p = g.patch;
    if g.tokens.shape() != [g.count, p * p * c] || g.count * p * p != h * w {
        return shape_err(format!("patch grid {:?} (P={p}) does not tile a {c}x{h}x{w} image", g.tokens.shape()));
    }
    let inv = unpatch_index_map(c, h, w, p)?;
    Tensor::new(vec![c, h, w], inv.iter().map(|&i| g.tokens.data()[i]).collect())
}

/// Uniform masking ratio in `[lo, hi]`.
pub fn sample_ratio<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> Result<f64> {
    if !(0.0 <= lo && lo <= hi && hi < 1.0) {
        return Err(Error::Config(format!("masking ratio range [{lo}, {hi}] must satisfy 0 <= lo <= hi < 1")));
    }
    if lo == hi {
        return Ok(lo);
    }
    Ok(rng.random_range(lo..=hi))
}

/// One masking event over `n` tokens.
///
/// `mask[i]` is `true` when token `i` is kept (unmasked); this is the `1`
/// entry of the binary mask vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub rho: f64,
    pub n: usize,
    pub kept: usize,
    pub perm: Vec<usize>,
    pub inv_perm: Vec<usize>,
    pub mask: Vec<bool>,
}

/// Number of tokens that survive masking: `floor(n·(1−ρ))`.
pub fn kept_count(n: usize, rho: f64) -> usize {
    (n as f64 * (1.0 - rho)).floor() as usize
}

impl MaskPlan {
    /// Shuffles `0..n` with Fisher–Yates and keeps the first
    /// `floor(n·(1−ρ))` positions.
    pub fn new<R: Rng + ?Sized>(n: usize, rho: f64, rng: &mut R) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("mask plan needs at least one token".into()));
        }
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::Config(format!("masking ratio {rho} outside [0, 1)")));
        }
        let kept = kept_count(n, rho);
        if kept == 0 {
            return Err(Error::Config(format!("ratio {rho} leaves no tokens out of {n}")));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        let plan = Self::from_perm(perm, rho, kept)?;
        PLANS_BUILT.with(|c| c.set(c.get() + 1));
        Ok(plan)
    }

    /// Builds a plan from an explicit permutation.
    pub fn from_perm(perm: Vec<usize>, rho: f64, kept: usize) -> Result<Self> {
        let n = perm.len();
        if kept == 0 || kept > n {
            return Err(Error::Config(format!("kept count {kept} invalid for {n} tokens")));
        }
        let mut inv_perm = vec![usize::MAX; n];
        for (slot, &orig) in perm.iter().enumerate() {
            if orig >= n || inv_perm[orig] != usize::MAX {
                return Err(Error::Config("mask permutation is not a bijection".into()));
            }
            inv_perm[orig] = slot;
        }
        let mut mask = vec![false; n];
        for &orig in &perm[..kept] {
            mask[orig] = true;
        }
        Ok(Self { rho, n, kept, perm, inv_perm, mask })
    }

    /// Original positions of the kept tokens, in shuffled order.
    pub fn kept_positions(&self) -> &[usize] {
        &self.perm[..self.kept]
    }
}

/// Keeps the first `kept` rows of the shuffled sequence: output row `j` is
/// input row `perm[j]`.
pub fn gather_kept<F: Real>(tape: &mut Tape<F>, tokens: Var, plan: &MaskPlan) -> Result<Var> {
    check_rows(tape, tokens, plan.n, "gather_kept")?;
    tape.index_select(tokens, plan.kept_positions())
}

/// Undoes the shuffle. `full` holds the kept tokens in shuffled order
/// followed by the mask tokens; output row `i` is the token whose original
/// position is `i`.
pub fn restore_order<F: Real>(tape: &mut Tape<F>, full: Var, plan: &MaskPlan) -> Result<Var> {
    check_rows(tape, full, plan.n, "restore_order")?;
    tape.index_select(full, &plan.inv_perm)
}

fn check_rows<F: Real>(tape: &Tape<F>, v: Var, n: usize, what: &str) -> Result<()> {
    match tape.shape(v).first() {
        Some(&rows) if rows == n => Ok(()),
        _ => shape_err(format!("{what}: expected {n} rows, got shape {:?}", tape.shape(v))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn patchify_counts() {
        let x = Tensor::<f32>::zeros(&[1, 512, 512]);
        let g = patchify(&x, 16).unwrap();
        assert_eq!(g.count, 1024);
        assert_eq!(g.tokens.shape(), &[1024, 256]);

        let x = Tensor::<f32>::from_f64(&[1, 2, 2], &[1., 2., 3., 4.]).unwrap();
        let g = patchify(&x, 2).unwrap();
        assert_eq!(g.count, 1);
        assert_eq!(g.tokens.data(), x.data());

        assert!(matches!(patchify(&Tensor::<f32>::zeros(&[1, 6, 8]), 4), Err(Error::Shape(_))));
    }

    #[test]
    fn unpatchify_rejects_mismatch_and_zero_roundtrip() {
        let g = PatchGrid { patch: 2, count: 4, tokens: Tensor::<f32>::zeros(&[4, 4]) };
        assert_eq!(unpatchify(&g, 4, 4, 1).unwrap(), Tensor::zeros(&[1, 4, 4]));
        assert!(matches!(unpatchify(&g, 4, 8, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn ratio_range_validation() {
        let mut r = rng::stream(0, &[]);
        assert_eq!(sample_ratio(&mut r, 0.5, 0.5).unwrap(), 0.5);
        assert!(matches!(sample_ratio(&mut r, 0.8, 0.3), Err(Error::Config(_))));
        assert!(matches!(sample_ratio(&mut r, 0.3, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn kept_counts() {
        let mut r = rng::stream(1, &[]);
        assert_eq!(MaskPlan::new(16, 0.5, &mut r).unwrap().kept, 8);
        assert_eq!(MaskPlan::new(10, 0.75, &mut r).unwrap().kept, 2);
        assert!(matches!(MaskPlan::new(3, 0.9, &mut r), Err(Error::Config(_))));
    }

    #[test]
    fn identity_perm_gather_and_restore() {
        let plan = MaskPlan::from_perm(vec![0, 1, 2, 3], 0.5, 2).unwrap();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[4, 1], &[1., 2., 3., 4.]).unwrap());
        let kept = gather_kept(&mut tape, x, &plan).unwrap();
        assert_eq!(tape.value(kept).data(), &[1., 2.]);
        let restored = restore_order(&mut tape, x, &plan).unwrap();
        assert_eq!(tape.value(restored), tape.value(x));

        let swap = MaskPlan::from_perm(vec![1, 0], 0.0, 2).unwrap();
        let y = tape.constant(Tensor::from_f64(&[2, 1], &[5., 6.]).unwrap());
        let shuffled = gather_kept(&mut tape, y, &swap).unwrap();
        assert_eq!(tape.value(shuffled).data(), &[6., 5.]);
        let back = restore_order(&mut tape, shuffled, &swap).unwrap();
        assert_eq!(tape.value(back).data(), &[5., 6.]);

        assert!(matches!(gather_kept(&mut tape, y, &plan), Err(Error::Shape(_))));
    }
}
