use serde::{Deserialize, Serialize};

use crate::params::UnconstrainedParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates over the flattened parameter vector (see
/// [`UnconstrainedParams::to_flat`]).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self {
            first: vec![0.0; num_params],
            second: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn for_params(u: &UnconstrainedParams) -> Self {
        Self::new(u.num_params())
    }
}

/// Bias-corrected Adam update on a flat vector.
pub fn adam_update(theta: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64, hp: &AdamHyper) {
    assert_eq!(theta.len(), grad.len());
    assert_eq!(theta.len(), state.first.len());
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for i in 0..theta.len() {
        let g = grad[i];
        state.first[i] = hp.beta1 * state.first[i] + (1.0 - hp.beta1) * g;
        state.second[i] = hp.beta2 * state.second[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = state.first[i] / c1;
        let v_hat = state.second[i] / c2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
}

pub fn adam_step(
    u: &UnconstrainedParams,
    grad: &UnconstrainedParams,
    state: &mut AdamState,
    lr: f64,
    hp: &AdamHyper,
) -> UnconstrainedParams {
    let mut theta = u.to_flat();
    adam_update(&mut theta, &grad.to_flat(), state, lr, hp);
    UnconstrainedParams::from_flat(u.k(), u.dim(), &theta)
}
