//! Latent transformer block: pre-norm attention and MLP sub-layers whose
//! layer norms are modulated by scale/shift vectors regressed from the
//! latent token, with each residual branch gated by a per-dimension α.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::embedder::LatentTokens;
use crate::error::Result;
use crate::model::attention::{relpos_msa, AttentionParams, Linear};
use crate::model::params::{Bound, ParamStore};
use crate::model::ModelConfig;
use crate::tensor::Real;

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub attn: AttentionParams,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
    /// `D → 6D` map producing γ₁, β₁, α₁, γ₂, β₂, α₂ (in that order).
    /// Zero-initialized. Absent when the latent embedder is disabled.
    pub modulation: Option<Linear>,
}

impl BlockParams {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let d = cfg.dim;
        let hidden = cfg.mlp_hidden();
        Ok(Self {
            attn: AttentionParams::new(store, rng, &format!("{name}.attn"), d, cfg.heads, cfg.max_len())?,
            mlp_in: Linear::new(store, rng, &format!("{name}.mlp.fc1"), d, hidden)?,
            mlp_out: Linear::new(store, rng, &format!("{name}.mlp.fc2"), hidden, d)?,
            modulation: if cfg.toggles.latent_embedder {
                Some(Linear::zeros(store, &format!("{name}.adaln"), d, 6 * d)?)
            } else {
                None
            },
        })
    }
}

/// The six `1×D` modulation vectors of one block.
#[derive(Debug, Clone, Copy)]
pub struct Modulation {
    pub gamma1: Var,
    pub beta1: Var,
    pub alpha1: Var,
    pub gamma2: Var,
    pub beta2: Var,
    pub alpha2: Var,
}

impl Modulation {
    /// Splits a `1×6D` tensor.
    pub fn split<F: Real>(tape: &mut Tape<F>, m: Var, d: usize) -> Result<Self> {
        let mut parts = [m; 6];
        for (i, p) in parts.iter_mut().enumerate() {
            *p = tape.slice_cols(m, i * d, (i + 1) * d)?;
        }
        let [gamma1, beta1, alpha1, gamma2, beta2, alpha2] = parts;
        Ok(Self { gamma1, beta1, alpha1, gamma2, beta2, alpha2 })
    }

    pub fn from_latent<F: Real>(
        tape: &mut Tape<F>,
        bound: &Bound,
        map: &Linear,
        z_le: LatentTokens,
        d: usize,
    ) -> Result<Self> {
        let m = map.forward(tape, bound, z_le.0)?;
        Self::split(tape, m, d)
    }
}

/// `(1 + γ)·x + β`, computed as `x + x·γ + β`.
pub fn modulate<F: Real>(tape: &mut Tape<F>, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let scaled = tape.mul(x, gamma)?;
    let y = tape.add(x, scaled)?;
    tape.add(y, beta)
}

pub struct BlockOutput {
    pub out: Var,
    pub attn_probs: Vec<Var>,
}

/// Runs one block. With `modulation`, both sub-layers follow
/// `z + α·f((1+γ)·LN(z) + β)`; without it they are plain pre-norm residuals
/// `z + f(LN(z))`.
pub fn lt_block<F: Real>(
    tape: &mut Tape<F>,
    bound: &Bound,
    z: Var,
    params: &BlockParams,
    modulation: Option<Modulation>,
    positions: &[usize],
    use_bias: bool,
) -> Result<BlockOutput> {
    let eps = F::from_f64_lossy(LN_EPS);

    let mut h = tape.layer_norm(z, eps)?;
    if let Some(m) = modulation {
        h = modulate(tape, h, m.gamma1, m.beta1)?;
    }
    let attn = relpos_msa(tape, bound, h, &params.attn, positions, use_bias)?;
    let branch = match modulation {
        Some(m) => tape.mul(attn.out, m.alpha1)?,
        None => attn.out,
    };
    let z1 = tape.add(z, branch)?;

    let mut h = tape.layer_norm(z1, eps)?;
    if let Some(m) = modulation {
        h = modulate(tape, h, m.gamma2, m.beta2)?;
    }
    let h = params.mlp_in.forward(tape, bound, h)?;
    let h = tape.gelu(h);
    let h = params.mlp_out.forward(tape, bound, h)?;
    let branch = match modulation {
        Some(m) => tape.mul(h, m.alpha2)?,
        None => h,
    };
    let out = tape.add(z1, branch)?;
    Ok(BlockOutput { out, attn_probs: attn.probs })
}
