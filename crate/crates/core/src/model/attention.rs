//! Multi-head self-attention with an additive relative position bias.
//!
//! The bias table of each head has `2·L_max` entries: entries
//! `0..2·L_max−1` are indexed by `(pos_i − pos_j) + L_max − 1`, and the last
//! entry is the bias for any pair involving the cls token. Positions are
//! sequence positions with the cls token at 0 and patch `k` at `k + 1`, so
//! shuffled (masked) sequences keep the offsets of their original patches.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::model::params::{trunc_normal, xavier, Bound, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), xavier(rng, fan_in, fan_out), true)?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]), true)?;
        Ok(Self { w, b })
    }

    /// Zero weight and bias.
    pub fn zeros<F: Real>(store: &mut ParamStore<F>, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let w = store.add(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]), true)?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]), true)?;
        Ok(Self { w, b })
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound.var(self.w))?;
        tape.add(y, bound.var(self.b))
    }
}

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    /// `[heads, 2·L_max]` bias table.
    pub rel: ParamId,
    pub heads: usize,
    pub max_len: usize,
}

impl AttentionParams {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        max_len: usize,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim)?,
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim)?,
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim)?,
            o: Linear::new(store, rng, &format!("{name}.o"), dim, dim)?,
            rel: store.add(format!("{name}.relpos"), trunc_normal(rng, &[heads, 2 * max_len], 0.02), true)?,
            heads,
            max_len,
        })
    }
}

/// Flat indices into the `[heads, 2·L_max]` table building the `L×L` bias
/// of `head`.
pub fn bias_indices(positions: &[usize], head: usize, max_len: usize) -> Vec<usize> {
    let width = 2 * max_len;
    let base = head * width;
    let mut idx = Vec::with_capacity(positions.len() * positions.len());
    for &pi in positions {
        for &pj in positions {
            if pi == 0 || pj == 0 {
                idx.push(base + width - 1);
            } else {
                idx.push(base + pi + max_len - 1 - pj);
            }
        }
    }
    idx
}

/// Output of one attention call: the projected result and the post-softmax
/// attention matrix of each head.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub out: Var,
    pub probs: Vec<Var>,
}

/// `softmax(Q·Kᵀ/√d_k + B_r)·V` per head, heads concatenated and projected.
pub fn relpos_msa<F: Real>(
    tape: &mut Tape<F>,
    bound: &Bound,
    z: Var,
    params: &AttentionParams,
    positions: &[usize],
    use_bias: bool,
) -> Result<AttentionOutput> {
    let (len, dim) = match tape.shape(z) {
        [l, d] => (*l, *d),
        s => return shape_err(format!("attention input must be [L, D], got {s:?}")),
    };
    if len > params.max_len {
        return Err(Error::Capacity { len, max: params.max_len });
    }
    if positions.len() != len {
        return shape_err(format!("{} positions for a sequence of {len}", positions.len()));
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= params.max_len) {
        return Err(Error::Capacity { len: p + 1, max: params.max_len });
    }
    if dim % params.heads != 0 {
        return shape_err(format!("dim {dim} not divisible by {} heads", params.heads));
    }
    let dh = dim / params.heads;
    let q = params.q.forward(tape, bound, z)?;
    let k = params.k.forward(tape, bound, z)?;
    let v = params.v.forward(tape, bound, z)?;
    let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
    let mut heads_out = Vec::with_capacity(params.heads);
    let mut probs = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let qh = tape.slice_cols(q, h * dh, (h + 1) * dh)?;
        let kh = tape.slice_cols(k, h * dh, (h + 1) * dh)?;
        let vh = tape.slice_cols(v, h * dh, (h + 1) * dh)?;
        let scores = tape.matmul_t(qh, kh)?;
        let mut scores = tape.scale(scores, scale);
        if use_bias {
            let idx = bias_indices(positions, h, params.max_len);
            let bias = tape.gather(bound.var(params.rel), &idx, &[len, len])?;
            scores = tape.add(scores, bias)?;
        }
        let p = tape.softmax(scores, 1)?;
        heads_out.push(tape.matmul(p, vh)?);
        probs.push(p);
    }
    let cat = tape.concat_cols(&heads_out)?;
    let out = params.o.forward(tape, bound, cat)?;
    Ok(AttentionOutput { out, probs })
}
