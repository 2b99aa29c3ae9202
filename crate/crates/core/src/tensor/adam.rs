use std::collections::BTreeMap;

use crate::error::{shape_err, Result};

use super::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Tensor,
    pub v: Tensor,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(dims: &[usize], config: AdamConfig) -> Self {
        Self {
            step: 0,
            m: Tensor::zeros(dims),
            v: Tensor::zeros(dims),
            config,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step(param: &mut Tensor, grad: &Tensor, state: &mut AdamState) -> Result<()> {
    if param.dims() != grad.dims() || param.dims() != state.m.dims() || param.dims() != state.v.dims() {
        return Err(shape_err!(
            "adam: param {:?}, grad {:?}, moments {:?}/{:?}",
            param.dims(),
            grad.dims(),
            state.m.dims(),
            state.v.dims()
        ));
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let (m, v) = (state.m.data_mut(), state.v.data_mut());
    for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
    }
    Ok(())
}

/// Adam over a named parameter set. States are created lazily on first use.
#[derive(Debug, Clone, Default)]
pub struct Optimizer {
    pub config: AdamConfig,
    pub states: BTreeMap<String, AdamState>,
}

impl Optimizer {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            states: BTreeMap::new(),
        }
    }

    /// Drops all moment estimates and step counters.
    pub fn reset(&mut self, lr: f64) {
        self.states.clear();
        self.config.lr = lr;
    }

    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        let config = self.config;
        let state = self
            .states
            .entry(name.to_string())
            .or_insert_with(|| AdamState::new(param.dims(), config));
        state.config.lr = config.lr;
        adam_step(param, grad, state)
    }

    /// Largest step count over all tracked parameters.
    pub fn step_count(&self) -> u64 {
        self.states.values().map(|s| s.step).max().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = Tensor::from_fn(&[3, 2], |i| i as f64 - 2.5);
        let before = p.clone();
        let mut st = AdamState::new(p.dims(), AdamConfig::default());
        for _ in 0..3 {
            adam_step(&mut p, &Tensor::zeros(&[3, 2]), &mut st).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step, 3);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::scalar(1.0);
        let mut st = AdamState::new(&[1], AdamConfig::default());
        adam_step(&mut p, &Tensor::scalar(1.0), &mut st).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps)
        let expected = 1.0 - 0.0003 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15);
        assert!((p.item() - 0.9997).abs() < 1e-11);
    }

    #[test]
    fn two_steps_match_scalar_recurrence() {
        let (lr, b1, b2, eps) = (3e-4, 0.9, 0.999, 1e-8);
        let g = 0.7;
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 2.0f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        let mut p = Tensor::scalar(2.0);
        let mut st = AdamState::new(&[1], AdamConfig::default());
        for _ in 0..2 {
            adam_step(&mut p, &Tensor::scalar(g), &mut st).unwrap();
        }
        assert!((p.item() - x).abs() < 1e-12);
    }

    #[test]
    fn mismatched_dims_are_rejected() {
        let mut p = Tensor::zeros(&[2]);
        let mut st = AdamState::new(&[2], AdamConfig::default());
        assert!(adam_step(&mut p, &Tensor::zeros(&[3]), &mut st).is_err());
    }

    #[test]
    fn reset_clears_state() {
        let mut opt = Optimizer::new(AdamConfig::default());
        let mut p = Tensor::scalar(0.0);
        opt.step("w", &mut p, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(opt.step_count(), 1);
        opt.reset(3e-5);
        assert_eq!(opt.step_count(), 0);
        assert_eq!(opt.config.lr, 3e-5);
    }
}
