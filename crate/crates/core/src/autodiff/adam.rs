use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len()],
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFinite {
                term: "adam gradient".into(),
            });
        }
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((pv, &gv), (mv, vv)) in it {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_from_fresh_state_keeps_params() {
        let mut params = vec![Tensor::vector(vec![1.0, -2.0])];
        let mut st = AdamState::new(&params);
        adam_step(&mut params, &[Tensor::zeros(&[2])], &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn zero_gradient_decays_moments() {
        let cfg = AdamConfig::default();
        let mut params = vec![Tensor::vector(vec![1.0])];
        let mut st = AdamState::new(&params);
        adam_step(&mut params, &[Tensor::vector(vec![0.5])], &mut st, &cfg).unwrap();
        let (m0, v0) = (st.m[0].data()[0], st.v[0].data()[0]);
        adam_step(&mut params, &[Tensor::zeros(&[1])], &mut st, &cfg).unwrap();
        assert!((st.m[0].data()[0] - cfg.beta1 * m0).abs() < 1e-15);
        assert!((st.v[0].data()[0] - cfg.beta2 * v0).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_steps_by_lr() {
        let cfg = AdamConfig::with_lr(0.01);
        let mut params = vec![Tensor::vector(vec![0.0])];
        let mut st = AdamState::new(&params);
        let mut prev = 0.0;
        for i in 0..200 {
            adam_step(&mut params, &[Tensor::vector(vec![3.0])], &mut st, &cfg).unwrap();
            let now = params[0].data()[0];
            if i > 0 {
                assert!(((prev - now) - 0.01).abs() < 1e-6);
            }
            prev = now;
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let cfg = AdamConfig::with_lr(0.01);
        let mut params = vec![Tensor::vector(vec![1.0, -0.8, 0.5])];
        let mut st = AdamState::new(&params);
        for _ in 0..500 {
            let g = params[0].map(|x| 2.0 * x);
            adam_step(&mut params, &[g], &mut st, &cfg).unwrap();
        }
        assert!(params[0].max_abs() < 1e-3, "{:?}", params[0]);
    }

    #[test]
    fn nan_gradient_is_rejected() {
        let mut params = vec![Tensor::vector(vec![1.0])];
        let mut st = AdamState::new(&params);
        let err = adam_step(&mut params, &[Tensor::vector(vec![f64::NAN])], &mut st, &AdamConfig::default());
        assert!(matches!(err, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut params = vec![Tensor::vector(vec![1.0, 2.0])];
        let mut st = AdamState::new(&params);
        assert!(adam_step(&mut params, &[Tensor::zeros(&[3])], &mut st, &AdamConfig::default()).is_err());
    }
}
