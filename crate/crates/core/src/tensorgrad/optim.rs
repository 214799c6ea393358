//! AdamW: Adam moments plus decoupled weight decay.

use super::tape::{Grads, Params};
use super::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig<S> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    /// Decoupled decay: with zero gradient each step scales a parameter by
    /// exactly `1 - lr * weight_decay`.
    pub weight_decay: S,
}

impl<S: Scalar> AdamWConfig<S> {
    pub fn new(lr: S, weight_decay: S) -> Self {
        AdamWConfig {
            lr,
            beta1: S::cast_from(0.9),
            beta2: S::cast_from(0.999),
            eps: S::cast_from(1e-8),
            weight_decay,
        }
    }
}

/// First/second moment estimates, aligned with a [`Params`] store.
#[derive(Debug, Clone)]
pub struct AdamWState<S> {
    step: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamWState<S> {
    pub fn new(params: &Params<S>) -> Self {
        let zeros: Vec<Tensor<S>> = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        AdamWState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One optimizer step over all parameters.
pub fn adamw_step<S: Scalar>(
    params: &mut Params<S>,
    grads: &Grads<S>,
    state: &mut AdamWState<S>,
    cfg: &AdamWConfig<S>,
) {
    state.step += 1;
    let one = S::one();
    let bc1 = one - cfg.beta1.powi(state.step as i32);
    let bc2 = one - cfg.beta2.powi(state.step as i32);
    for id in params.ids() {
        let g = grads.get(id);
        let m = state.m[id.index()].data_mut();
        let v = state.v[id.index()].data_mut();
        let p = params.value_mut(id).data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = cfg.beta1 * m[i] + (one - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (one - cfg.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] = p[i] - cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * p[i]);
        }
    }
}
