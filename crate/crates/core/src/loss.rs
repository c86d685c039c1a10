//! Training objective: cross-entropy plus the reconstruction term
//! `‖x′ − x‖² / (H·W·C)`.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Real;

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub ce: Var,
    /// Absent when the auxiliary term is switched off.
    pub aux: Option<Var>,
}

/// `CE(logits, y) + mse(x′, x)`; the second term only with `aux`.
pub fn combined_loss<F: Real>(
    tape: &mut Tape<F>,
    logits: Var,
    target: usize,
    recon: Var,
    image: Var,
    aux: bool,
) -> Result<LossParts> {
    let ce = tape.cross_entropy(logits, target)?;
    if !aux {
        return Ok(LossParts { total: ce, ce, aux: None });
    }
    let mse = tape.mse(recon, image)?;
    let total = tape.add(ce, mse)?;
    Ok(LossParts { total, ce, aux: Some(mse) })
}
