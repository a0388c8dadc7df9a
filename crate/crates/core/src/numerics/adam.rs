use std::collections::BTreeMap;

use super::params::{Gradients, ParamStore};
use crate::error::{dim_err, Error, Result};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return dim_err(format!(
            "adam: params {}, grads {}, moments {}/{}",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        ));
    }
    if state.lr < 0.0 || !state.lr.is_finite() {
        return Err(Error::Contract(format!("learning rate {}", state.lr)));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Adam over every trainable tensor of a [`ParamStore`].
#[derive(Debug, Clone, Default)]
pub struct Adam {
    states: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies one update at learning rate `lr`. Trainable parameters without a
    /// gradient are treated as having a zero gradient so every state advances in
    /// lockstep.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        let names: Vec<String> = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.to_string())
            .collect();
        for name in names {
            let tensor = store.get_mut(&name)?;
            let len = tensor.numel();
            let state = self
                .states
                .entry(name.clone())
                .or_insert_with(|| AdamState::new(len, lr));
            state.lr = lr;
            let zeros;
            let g = match grads.get(&name) {
                Some(g) => g,
                None => {
                    zeros = vec![0.0; len];
                    &zeros
                }
            };
            adam_step(tensor.data_mut(), g, state)?;
        }
        Ok(())
    }

    pub fn state(&self, name: &str) -> Option<&AdamState> {
        self.states.get(name)
    }
}

/// Learning rate decayed linearly from `base` towards zero over `total_steps`.
pub fn linear_decay(base: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return base;
    }
    base * (1.0 - step as f64 / total_steps as f64).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2, 1e-2);
        adam_step(&mut p, &[0.0, 0.0], &mut s).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_is_sign_of_gradient() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1, 1e-2);
        adam_step(&mut p, &[0.1], &mut s).unwrap();
        assert!((p[0] + 0.01).abs() < 1e-5);
    }

    #[test]
    fn step_counter_increments() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1, 1e-3);
        adam_step(&mut p, &[0.5], &mut s).unwrap();
        adam_step(&mut p, &[0.5], &mut s).unwrap();
        assert_eq!(s.step, 2);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p = vec![0.3, 0.4];
        let mut s = AdamState::new(2, 0.0);
        for _ in 0..5 {
            adam_step(&mut p, &[1.0, -3.0], &mut s).unwrap();
        }
        assert_eq!(p, vec![0.3, 0.4]);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![0.0; 3];
        let mut s = AdamState::new(3, 1e-3);
        assert!(adam_step(&mut p, &[0.0; 2], &mut s).is_err());
    }

    #[test]
    fn decay_schedule() {
        assert_eq!(linear_decay(1.0, 0, 4), 1.0);
        assert_eq!(linear_decay(1.0, 2, 4), 0.5);
        assert_eq!(linear_decay(1.0, 4, 4), 0.0);
    }
}
