use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWParams {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub weight_decay: Real,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates for one parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Real>,
    pub v: Vec<Real>,
    pub step: u32,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One AdamW update: decoupled decay `p -= lr·wd·p`, then the bias-corrected
/// Adam step `p -= lr · m̂ / (sqrt(v̂) + eps)`.
pub fn adamw_step(param: &mut [Real], grad: &[Real], state: &mut AdamState, hp: &AdamWParams) {
    assert_eq!(param.len(), grad.len(), "adamw: grad length mismatch");
    assert_eq!(param.len(), state.m.len(), "adamw: state length mismatch");
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for i in 0..param.len() {
        let g = grad[i];
        param[i] -= hp.lr * hp.weight_decay * param[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        param[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
}

/// AdamW over a [`ParamStore`], with one moment state per named array.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub hp: AdamWParams,
    states: BTreeMap<String, AdamState>,
}

impl AdamW {
    pub fn new(hp: AdamWParams) -> Self {
        AdamW {
            hp,
            states: BTreeMap::new(),
        }
    }

    pub fn set_lr(&mut self, lr: Real) {
        self.hp.lr = lr;
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(String, Tensor)]) -> Result<()> {
        for (name, g) in grads {
            let p = store.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape("adamw", p.shape(), g.shape()));
            }
            let state = self
                .states
                .entry(name.clone())
                .or_insert_with(|| AdamState::new(g.numel()));
            adamw_step(p.data_mut(), g.data(), state, &self.hp);
        }
        Ok(())
    }
}

/// Exponential decay: `lr0 · gamma^epoch`.
pub fn lr_at_epoch(lr0: Real, gamma: Real, epoch: u32) -> Real {
    lr0 * gamma.powi(epoch as i32)
}

/// True once the last `patience` values brought no strict improvement over
/// the best earlier value. An empty history never stops.
pub fn early_stop_check(history: &[Real], patience: usize) -> bool {
    let Some(first) = history.first() else {
        return false;
    };
    let mut best = *first;
    let mut best_idx = 0;
    for (i, &v) in history.iter().enumerate().skip(1) {
        if v < best {
            best = v;
            best_idx = i;
        }
    }
    history.len() - 1 - best_idx >= patience
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut p = vec![0.3, -1.2];
        let mut st = AdamState::new(2);
        let hp = AdamWParams {
            weight_decay: 0.0,
            ..AdamWParams::default()
        };
        adamw_step(&mut p, &[0.0, 0.0], &mut st, &hp);
        assert_eq!(p, vec![0.3, -1.2]);
    }

    #[test]
    fn decoupled_decay_shrinks() {
        let mut p = vec![0.5, -2.0];
        let mut st = AdamState::new(2);
        let hp = AdamWParams {
            lr: 0.1,
            ..AdamWParams::default()
        };
        adamw_step(&mut p, &[0.0, 0.0], &mut st, &hp);
        assert!(p[0].abs() < 0.5 && p[1].abs() < 2.0);
    }

    #[test]
    fn schedule() {
        assert_eq!(lr_at_epoch(1e-5, 0.95, 0), 1e-5);
        assert!((lr_at_epoch(1e-5, 0.95, 2) - 9.025e-6).abs() < 1e-18);
        let lrs: Vec<Real> = (0..20).map(|e| lr_at_epoch(1.0, 0.95, e)).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn early_stopping_rule() {
        let improving: Vec<Real> = (0..30).map(|i| 1.0 / (i + 1) as Real).collect();
        for n in 1..=improving.len() {
            assert!(!early_stop_check(&improving[..n], 3));
        }
        assert!(early_stop_check(&[0.5; 4], 3));
        assert!(!early_stop_check(&[0.5; 3], 3));
        let h = [1.0, 0.9, 0.95, 0.96, 0.97];
        let first_stop = (1..=h.len()).find(|&n| early_stop_check(&h[..n], 3));
        assert_eq!(first_stop, Some(5)); // i.e. at index 4
    }
}
