use serde::{Deserialize, Serialize};

use super::params::Weights;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Weights,
    pub v: Weights,
}

impl AdamState {
    pub fn new(params: &Weights, config: AdamConfig) -> Self {
        Self { config, step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }
}

/// One bias-corrected Adam update of a flat parameter slice. `step` is the
/// 1-based index of this update.
pub fn adam_update(
    cfg: &AdamConfig,
    step: u64,
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
) {
    let c1 = 1.0 - cfg.beta1.powi(step as i32);
    let c2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

pub fn adam_step(params: &mut Weights, grads: &Weights, state: &mut AdamState) -> Result<()> {
    params.same_shapes(grads)?;
    params.same_shapes(&state.m)?;
    state.step += 1;
    let step = state.step;
    let cfg = state.config;
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut())
    {
        adam_update(&cfg, step, &mut p.data, &g.data, &mut m.data, &mut v.data);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::params::{Formulation, Geometry};

    #[test]
    fn first_step_by_hand() {
        let cfg = AdamConfig::default();
        let (mut p, mut m, mut v) = ([0.5], [0.0], [0.0]);
        adam_update(&cfg, 1, &mut p, &[2.0], &mut m, &mut v);
        // m_hat = 2, v_hat = 4: step = lr * 2 / (2 + eps).
        let expected = 0.5 - 1e-3 * 2.0 / (2.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
        assert!((p[0] - 0.499).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let g = Geometry::desk();
        let mut w = Weights::zeros(&g, Formulation::At);
        w.dense_w.data[3] = 0.7;
        let before = w.clone();
        let mut st = AdamState::new(&w, AdamConfig::default());
        adam_step(&mut w, &before.zeros_like(), &mut st).unwrap();
        assert_eq!(w, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let g = Geometry::desk();
        let mut w = Weights::zeros(&g, Formulation::At);
        let other = Weights::zeros(&g, Formulation::Static);
        let mut st = AdamState::new(&w, AdamConfig::default());
        assert!(adam_step(&mut w, &other, &mut st).is_err());
    }

    #[test]
    fn quadratic_loss_decreases() {
        let cfg = AdamConfig { learning_rate: 0.05, ..Default::default() };
        let f = |x: f64| (x - 3.0) * (x - 3.0);
        let (mut x, mut m, mut v) = ([0.0], [0.0], [0.0]);
        let mut losses = Vec::new();
        for step in 1..=100 {
            let g = 2.0 * (x[0] - 3.0);
            adam_update(&cfg, step, &mut x, &[g], &mut m, &mut v);
            losses.push(f(x[0]));
        }
        for w in losses[5..].windows(2) {
            assert!(w[1] < w[0], "{losses:?}");
        }
    }
}
