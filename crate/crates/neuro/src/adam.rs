use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tape::Gradients;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One bias-corrected Adam update. Gradients are rescaled to
/// `max_grad_norm` first when their global norm exceeds it. Returns the
/// global norm measured before clipping.
pub fn adam_step(params: &mut ParamStore, grads: &Gradients, state: &mut AdamState, cfg: &AdamConfig) -> f64 {
    let norm = grads.global_norm();
    let scale = match cfg.max_grad_norm {
        Some(max) if norm > max => max / norm,
        _ => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, g) in grads.tensors.iter().enumerate() {
        let p = params.get_mut(crate::params::ParamId(i)).data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, &gj) in g.data().iter().enumerate() {
            let gj = gj * scale;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn store(vals: &[f64]) -> ParamStore {
        let mut m = BTreeMap::new();
        m.insert("w".to_string(), Tensor::row_vector(vals.to_vec()));
        ParamStore::from_map(m)
    }

    fn grads(vals: &[f64]) -> Gradients {
        Gradients {
            tensors: vec![Tensor::row_vector(vals.to_vec())],
        }
    }

    #[test]
    fn zero_grads_leave_params() {
        let mut p = store(&[1.0, -2.0]);
        let before = p.clone();
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &grads(&[0.0, 0.0]), &mut s, &AdamConfig::default());
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = store(&[1.0]);
        let mut s = AdamState::new(&p);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        adam_step(&mut p, &grads(&[1.0]), &mut s, &cfg);
        // m_hat = 1, v_hat = 1
        let want = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.tensors()[0].data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn clipping_scales_moments() {
        let g = grads(&[3.0, 4.0]);
        let p0 = store(&[0.0, 0.0]);
        let cfg = AdamConfig {
            max_grad_norm: Some(0.5),
            ..AdamConfig::default()
        };
        let mut p = p0.clone();
        let mut s = AdamState::new(&p);
        let n = adam_step(&mut p, &g, &mut s, &cfg);
        assert_eq!(n, 5.0);
        // effective gradient is (0.3, 0.4)
        let m = s.m[0].data();
        assert!((m[0] - 0.1 * 0.3).abs() < 1e-15);
        assert!((m[1] - 0.1 * 0.4).abs() < 1e-15);
    }
}
