//! Adam with decoupled weight decay, an optional Lookahead wrapper and a
//! per-step cosine learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamId, ParamStore};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LookaheadConfig {
    pub k: u64,
    pub alpha: f64,
}

impl Default for LookaheadConfig {
    fn default() -> Self {
        Self { k: 5, alpha: 0.5 }
    }
}

/// Optimizer state for one trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Slot<F: Real> {
    pub param: ParamId,
    pub name: String,
    pub m: Vec<F>,
    pub v: Vec<F>,
    pub slow: Option<Vec<F>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<F: Real> {
    pub step: u64,
    pub slots: Vec<Slot<F>>,
}

#[derive(Debug, Clone)]
pub struct Optimizer<F: Real> {
    pub adam: AdamConfig,
    pub lookahead: Option<LookaheadConfig>,
    pub state: OptimState<F>,
}

impl<F: Real> Optimizer<F> {
    /// State is created only for trainable parameters; frozen ones are
    /// never touched.
    pub fn new(store: &ParamStore<F>, adam: AdamConfig, lookahead: Option<LookaheadConfig>) -> Result<Self> {
        if let Some(la) = lookahead {
            if la.k == 0 || !(0.0..=1.0).contains(&la.alpha) {
                return Err(Error::Config(format!("lookahead needs k > 0 and alpha in [0, 1], got {la:?}")));
            }
        }
        let slots = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, p)| {
                let n = p.value.numel();
                Slot {
                    param: id,
                    name: p.name.clone(),
                    m: vec![F::zero(); n],
                    v: vec![F::zero(); n],
                    slow: lookahead.map(|_| p.value.data().to_vec()),
                }
            })
            .collect();
        Ok(Self { adam, lookahead, state: OptimState { step: 0, slots } })
    }

    pub fn step_count(&self) -> u64 {
        self.state.step
    }

    /// One update. `grads` is indexed by parameter position in the store;
    /// a missing gradient counts as zero.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[Option<Vec<F>>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Contract(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        for slot in &self.state.slots {
            if let Some(g) = &grads[slot.param.index()] {
                if g.len() != slot.m.len() {
                    return Err(Error::Contract(format!(
                        "gradient for {} has {} elements, expected {}",
                        slot.name,
                        g.len(),
                        slot.m.len()
                    )));
                }
            }
        }
        self.state.step += 1;
        let t = self.state.step;
        let a = self.adam;
        let b1 = F::from_f64_lossy(a.beta1);
        let b2 = F::from_f64_lossy(a.beta2);
        let one = F::one();
        let c1 = F::from_f64_lossy(1.0 - a.beta1.powf(t as f64));
        let c2 = F::from_f64_lossy(1.0 - a.beta2.powf(t as f64));
        let eps = F::from_f64_lossy(a.eps);
        let lr_f = F::from_f64_lossy(lr);
        let decay = F::from_f64_lossy(lr * a.weight_decay);
        let sync = self.lookahead.filter(|la| t.is_multiple_of(la.k));

        for slot in &mut self.state.slots {
            let param = store.get_mut(slot.param).value.data_mut();
            let grad = grads[slot.param.index()].as_deref();
            for i in 0..param.len() {
                let g = grad.map_or(F::zero(), |g| g[i]);
                slot.m[i] = b1 * slot.m[i] + (one - b1) * g;
                slot.v[i] = b2 * slot.v[i] + (one - b2) * g * g;
                let m_hat = slot.m[i] / c1;
                let v_hat = slot.v[i] / c2;
                param[i] -= decay * param[i];
                param[i] -= lr_f * m_hat / (v_hat.sqrt() + eps);
            }
            if let (Some(la), Some(slow)) = (sync, slot.slow.as_mut()) {
                let alpha = F::from_f64_lossy(la.alpha);
                for (s, p) in slow.iter_mut().zip(param.iter_mut()) {
                    *s += alpha * (*p - *s);
                    *p = *s;
                }
            }
        }
        Ok(())
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·step/total))`, clamped to
/// `lr_min` once `step` passes `total`.
pub fn cosine_lr(step: u64, total: u64, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 || step >= total {
        return if total == 0 { lr_max } else { lr_min };
    }
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * step as f64 / total as f64).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(values: &[f64], trainable: bool) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::from_f64(&[values.len()], values).unwrap(), trainable).unwrap();
        s
    }

    #[test]
    fn zero_grad_without_decay_is_a_no_op() {
        let mut s = store(&[0.5, -2.0], true);
        let cfg = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
        let mut opt = Optimizer::new(&s, cfg, None).unwrap();
        for _ in 0..3 {
            opt.step(&mut s, &[Some(vec![0.0, 0.0])], 1e-2).unwrap();
        }
        assert_eq!(s.iter().next().unwrap().1.value.data(), &[0.5, -2.0]);
        assert_eq!(opt.step_count(), 3);
    }

    #[test]
    fn single_step_closed_form() {
        let mut s = store(&[1.0], true);
        let cfg = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
        let mut opt = Optimizer::new(&s, cfg, None).unwrap();
        opt.step(&mut s, &[Some(vec![1.0])], 1e-3).unwrap();
        let m_hat = 0.1 / (1.0 - 0.9);
        let v_hat = 0.001 / (1.0 - 0.999);
        let want = 1.0 - 1e-3 * m_hat / (f64::sqrt(v_hat) + 1e-8);
        assert!((s.iter().next().unwrap().1.value.data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameters_have_no_state() {
        let mut s = store(&[1.0], false);
        s.add("q", Tensor::from_f64(&[1], &[2.0]).unwrap(), true).unwrap();
        let mut opt = Optimizer::new(&s, AdamConfig::default(), None).unwrap();
        assert_eq!(opt.state.slots.len(), 1);
        assert_eq!(opt.state.slots[0].name, "q");
        opt.step(&mut s, &[Some(vec![5.0]), Some(vec![1.0])], 0.1).unwrap();
        assert_eq!(s.iter().next().unwrap().1.value.data(), &[1.0]);
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let mut s = store(&[1.0, 2.0], true);
        let mut opt = Optimizer::new(&s, AdamConfig::default(), None).unwrap();
        assert!(matches!(opt.step(&mut s, &[Some(vec![1.0])], 0.1), Err(Error::Contract(_))));
        assert!(matches!(opt.step(&mut s, &[], 0.1), Err(Error::Contract(_))));
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn lookahead_alpha_extremes() {
        let la = |alpha| Some(LookaheadConfig { k: 2, alpha });
        let cfg = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };

        let mut s = store(&[1.0], true);
        let mut opt = Optimizer::new(&s, cfg, la(1.0)).unwrap();
        for _ in 0..2 {
            opt.step(&mut s, &[Some(vec![1.0])], 0.1).unwrap();
        }
        let fast = s.iter().next().unwrap().1.value.data()[0];
        assert!(fast < 1.0);
        assert_eq!(opt.state.slots[0].slow.as_ref().unwrap()[0], fast);

        let mut s = store(&[1.0], true);
        let mut opt = Optimizer::new(&s, cfg, la(0.0)).unwrap();
        opt.step(&mut s, &[Some(vec![1.0])], 0.1).unwrap();
        assert!(s.iter().next().unwrap().1.value.data()[0] < 1.0);
        opt.step(&mut s, &[Some(vec![1.0])], 0.1).unwrap();
        assert_eq!(s.iter().next().unwrap().1.value.data()[0], 1.0);
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 100, 1e-4, 0.0), 1e-4);
        assert_eq!(cosine_lr(100, 100, 1e-4, 0.0), 0.0);
        assert!((cosine_lr(50, 100, 1e-4, 0.0) - 5e-5).abs() < 1e-18);
        assert_eq!(cosine_lr(150, 100, 1e-4, 1e-6), 1e-6);
        let lrs: Vec<f64> = (0..=100).map(|s| cosine_lr(s, 100, 1e-3, 1e-5)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
