//! Adam.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamId, ParamSet};
use crate::tensor::Tensor;

pub const DEFAULT_LR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter of a set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, e)| Tensor::zeros(e.value.shape()))
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One Adam update of every trainable parameter. Absent gradients count as
/// zero.
pub fn adam_step(params: &mut ParamSet, grads: &ParamGrads, state: &mut AdamState) -> Result<()> {
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Config(alloc::format!(
            "optimizer tracks {} tensors, parameter set has {}",
            state.m.len(),
            params.len()
        )));
    }
    for i in 0..params.len() {
        let id = ParamId(i);
        let shape = params.get(id).shape();
        if state.m[i].shape() != shape || state.v[i].shape() != shape {
            return Err(Error::shape("adam_step", shape, state.m[i].shape()));
        }
        if let Some(g) = grads.get(id) {
            if g.shape() != shape {
                return Err(Error::shape("adam_step", shape, g.shape()));
            }
        }
    }

    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step as f64;
    let c1 = 1.0 - libm::pow(beta1, t);
    let c2 = 1.0 - libm::pow(beta2, t);
    for i in 0..params.len() {
        let id = ParamId(i);
        if !params.entry(id).trainable {
            continue;
        }
        let m = state.m[i].values_mut();
        let v = state.v[i].values_mut();
        match grads.get(id) {
            Some(g) => {
                for ((mi, vi), gi) in m.iter_mut().zip(v.iter_mut()).zip(g.values()) {
                    *mi = beta1 * *mi + (1.0 - beta1) * gi;
                    *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                }
            }
            None => {
                m.iter_mut().for_each(|mi| *mi *= beta1);
                v.iter_mut().for_each(|vi| *vi *= beta2);
            }
        }
        let p = params.get_mut(id).values_mut();
        for ((pi, mi), vi) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
            let m_hat = mi / c1;
            let v_hat = vi / c2;
            *pi -= lr * m_hat / (libm::sqrt(v_hat) + epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Graph, Group};
    use alloc::vec;

    fn one_param(values: Vec<f64>) -> (ParamSet, ParamId) {
        let mut p = ParamSet::new();
        let id = p
            .add("w", Group::Meta, Tensor::vector(values).unwrap(), true)
            .unwrap();
        (p, id)
    }

    fn grads_for(p: &ParamSet, id: ParamId, g: Vec<f64>) -> ParamGrads {
        // Build gradients through the tape: d/dw sum(w * g) = g.
        let mut graph = Graph::new(p);
        let w = graph.param(id);
        let c = graph.constant(Tensor::vector(g).unwrap());
        let prod = graph.tape.mul(w, c).unwrap();
        let root = graph.tape.sum(prod);
        graph.backward(root).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (mut p, id) = one_param(vec![0.3, -1.2, 4.0]);
        let before = p.clone();
        let mut state = AdamState::new(&p, AdamConfig::default());
        let g = grads_for(&p, id, vec![0.0; 3]);
        for _ in 0..50 {
            adam_step(&mut p, &g, &mut state).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(state.step, 50);
    }

    #[test]
    fn first_step_magnitude_is_about_lr() {
        // Closed form for t = 1: m_hat = g, v_hat = g^2, so the step is
        // lr * g / (|g| + eps), within [0.9 lr, lr] whenever |g| >> eps.
        let grads = vec![1e-3, -0.5, 7.0, -300.0];
        let (mut p, id) = one_param(vec![0.0; 4]);
        let mut state = AdamState::new(&p, AdamConfig::default());
        let g = grads_for(&p, id, grads.clone());
        adam_step(&mut p, &g, &mut state).unwrap();
        let lr = DEFAULT_LR;
        for (delta, gi) in p.get(id).values().iter().zip(&grads) {
            let expected = -lr * gi / (gi.abs() + 1e-8);
            assert!((delta - expected).abs() < 1e-15);
            assert!(delta.abs() >= 0.9 * lr && delta.abs() <= lr);
            assert!(delta.signum() == -gi.signum());
        }
    }

    #[test]
    fn default_learning_rate() {
        assert_eq!(AdamConfig::default().lr, 1e-4);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let (mut p, _) = one_param(vec![0.0; 3]);
        let (other, _) = one_param(vec![0.0; 2]);
        let mut state = AdamState::new(&other, AdamConfig::default());
        let g = ParamGrads::zeros_like(&p);
        assert!(adam_step(&mut p, &g, &mut state).is_err());
    }

    #[test]
    fn minimizes_a_quadratic() {
        let (mut p, id) = one_param(vec![3.0, -2.0]);
        let mut state = AdamState::new(
            &p,
            AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
        );
        for _ in 0..500 {
            let w = p.get(id).values().to_vec();
            let g = grads_for(&p, id, w.iter().map(|x| 2.0 * x).collect());
            adam_step(&mut p, &g, &mut state).unwrap();
        }
        assert!(p.get(id).values().iter().all(|v| v.abs() < 0.05));
    }
}
