//! Adam with bias correction.

use crate::autodiff::ParamSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_LR: f64 = 0.001;

/// Moment estimates and hyperparameters of an Adam optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of steps taken.
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    /// Fresh state with zero moments shaped like `params`.
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// One update: `p -= lr * m̂ / (sqrt(v̂) + eps)`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape {
                op: "adam_step",
                left: vec![params.len()],
                right: vec![grads.len(), self.m.len()],
            });
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params.get(i).shape() || self.m[i].shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    left: params.get(i).shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(i).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", Tensor::scalar(value));
        p
    }

    #[test]
    fn first_step_with_unit_gradient() {
        let mut params = one_param(0.0);
        let mut state = AdamState::new(&params, 0.001);
        state.step(&mut params, &[Tensor::scalar(1.0)]).unwrap();
        let update = params.get(0).item();
        // m̂ = v̂ = 1, so the step is lr / (1 + eps)
        assert!((update - (-0.001 / (1.0 + 1e-8))).abs() < 1e-18);
        assert!((update - (-0.000999999995)).abs() < 1e-11);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut params = one_param(0.25);
        let mut state = AdamState::new(&params, 0.001);
        state.step(&mut params, &[Tensor::scalar(0.0)]).unwrap();
        assert_eq!(params.get(0).item(), 0.25);
    }

    #[test]
    fn identical_histories_give_identical_updates() {
        let mut params = ParamSet::new();
        params.push("a", Tensor::vector(vec![1.0, -1.0]));
        params.push("b", Tensor::vector(vec![1.0, -1.0]));
        let mut state = AdamState::new(&params, 0.01);
        for step in 0..5 {
            let g = Tensor::vector(vec![0.3 * step as f64, -0.7]);
            state.step(&mut params, &[g.clone(), g]).unwrap();
        }
        assert_eq!(params.get(0), params.get(1));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = one_param(0.0);
        let mut state = AdamState::new(&params, 0.001);
        assert!(state
            .step(&mut params, &[Tensor::vector(vec![1.0, 2.0])])
            .is_err());
    }
}
