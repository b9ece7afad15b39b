use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moments and step count for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl MomentState {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step(param: &mut [f64], grad: &[f64], state: &mut MomentState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    let n = param.len();
    if grad.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Contract(format!(
            "adam shapes disagree: param {n}, grad {}, moments {}/{}",
            grad.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..n {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        param[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    if param.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("adam update".into()));
    }
    Ok(())
}

/// Adam over a [`ParamStore`] with per-tensor moment state; only the listed
/// tensors are touched on each step.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    states: Vec<MomentState>,
}

impl Adam {
    pub fn new(params: &ParamStore, cfg: AdamConfig) -> Self {
        let states = params.tensors().iter().map(|t| MomentState::zeros(t.numel())).collect();
        Self { cfg, states }
    }

    pub fn state(&self, i: usize) -> &MomentState {
        &self.states[i]
    }

    /// Applies `grads[k]` to tensor `active[k]`.
    pub fn step(&mut self, params: &mut ParamStore, active: &[usize], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if active.len() != grads.len() {
            return Err(Error::Contract("one gradient per active tensor required".into()));
        }
        if params.len() != self.states.len() {
            return Err(Error::Contract("optimizer state does not match parameter store".into()));
        }
        for (&i, g) in active.iter().zip(grads) {
            adam_step(params.get_mut(i).data_mut(), g, &mut self.states[i], lr, &self.cfg)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = [0.5];
        let mut s = MomentState::zeros(1);
        adam_step(&mut p, &[1.0], &mut s, 1e-3, &AdamConfig::default()).unwrap();
        // eps perturbs the last digits only
        assert!((p[0] - (0.5 - 1e-3)).abs() < 1e-10);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_fresh_parameter_and_decays_moments() {
        let cfg = AdamConfig::default();
        let mut p = [0.25, -1.0];
        let mut s = MomentState::zeros(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, 1e-2, &cfg).unwrap();
        assert_eq!(p, [0.25, -1.0]);

        let mut s = MomentState {
            m: vec![0.4, -0.2],
            v: vec![0.1, 0.3],
            t: 3,
        };
        adam_step(&mut p, &[0.0, 0.0], &mut s, 1e-2, &cfg).unwrap();
        assert_eq!(s.m, vec![0.9 * 0.4, 0.9 * -0.2]);
        assert_eq!(s.v, vec![0.999 * 0.1, 0.999 * 0.3]);
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let mut p = [0.0; 3];
        let mut s = MomentState::zeros(3);
        assert!(matches!(
            adam_step(&mut p, &[1.0], &mut s, 1e-3, &AdamConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn quadratic_trajectory_matches_reference() {
        // reference Adam written out directly for f(x) = 0.5 * a * (x - c)^2
        let (a, c, lr) = (3.0f64, 1.5f64, 0.05f64);
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let mut x_ref = -2.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut reference = Vec::new();
        for t in 1..=10 {
            let g = a * (x_ref - c);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x_ref -= lr * mh / (vh.sqrt() + eps);
            reference.push(x_ref);
        }

        let mut store = ParamStore::new();
        store.push("x", Tensor::scalar(-2.0).unwrap());
        let mut opt = Adam::new(&store, AdamConfig::default());
        for r in reference {
            let g = a * (store.get(0).data()[0] - c);
            opt.step(&mut store, &[0], &[vec![g]], lr).unwrap();
            assert!((store.get(0).data()[0] - r).abs() <= 1e-12);
        }
    }

    #[test]
    fn inactive_tensors_are_untouched() {
        let mut store = ParamStore::new();
        store.push("a", Tensor::full(&[2], 1.0));
        store.push("b", Tensor::full(&[2], 1.0));
        let mut opt = Adam::new(&store, AdamConfig::default());
        opt.step(&mut store, &[1], &[vec![1.0, -1.0]], 0.1).unwrap();
        assert_eq!(store.get(0).data(), &[1.0, 1.0]);
        assert_eq!(opt.state(0), &MomentState::zeros(2));
        assert_ne!(store.get(1).data(), &[1.0, 1.0]);
    }
}
