use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ParamStore;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in parameter {0}; step skipped")]
    NonFiniteGradient(String),
    #[error("gradient count {grads} does not match parameter count {params}")]
    Mismatch { params: usize, grads: usize },
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

impl Adam {
    /// One bias-corrected Adam update. Leaves everything untouched if any
    /// gradient is non-finite.
    pub fn step(
        &self,
        params: &mut ParamStore,
        grads: &[Vec<f64>],
        state: &mut AdamState,
        lr: f64,
    ) -> Result<(), OptimError> {
        if grads.len() != params.len() || state.m.len() != params.len() {
            return Err(OptimError::Mismatch {
                params: params.len(),
                grads: grads.len(),
            });
        }
        for ((id, name, t), g) in params.iter().zip(grads) {
            if g.len() != t.numel() {
                return Err(OptimError::Mismatch {
                    params: t.numel(),
                    grads: g.len(),
                });
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(OptimError::NonFiniteGradient(format!("{name} (#{})", id.index())));
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (k, tensor) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut state.m[k], &mut state.v[k], &grads[k]);
            for (i, p) in tensor.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|x| *x *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(x: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.add("x", Tensor::vector(vec![x]));
        p
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = single(1.5);
        let mut st = AdamState::new(&p);
        Adam::default().step(&mut p, &[vec![0.0]], &mut st, 0.1).unwrap();
        assert_eq!(p.tensors_mut()[0].data(), &[1.5]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = single(0.0);
        let mut st = AdamState::new(&p);
        let adam = Adam::default();
        adam.step(&mut p, &[vec![1.0]], &mut st, 0.01).unwrap();
        // m_hat = v_hat = 1 after bias correction
        let expect = -0.01 / (1.0 + adam.eps);
        assert!((p.tensors_mut()[0].data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn minimizes_quadratic_like_scalar_recurrence() {
        let adam = Adam::default();
        let mut p = single(5.0);
        let mut st = AdamState::new(&p);
        for _ in 0..500 {
            let x = p.tensors_mut()[0].data()[0];
            adam.step(&mut p, &[vec![2.0 * x]], &mut st, 0.1).unwrap();
        }
        // independent scalar recurrence
        let (mut x, mut m, mut v) = (5.0f64, 0.0f64, 0.0f64);
        for t in 1..=500 {
            let g = 2.0 * x;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        let got = p.tensors_mut()[0].data()[0];
        assert!((got - x).abs() < 1e-12);
        assert!(got.abs() < 1e-2, "x = {got}");
    }

    #[test]
    fn non_finite_gradient_skips_step() {
        let mut p = single(2.0);
        let mut st = AdamState::new(&p);
        let err = Adam::default()
            .step(&mut p, &[vec![f64::NAN]], &mut st, 0.1)
            .unwrap_err();
        assert!(matches!(err, OptimError::NonFiniteGradient(_)));
        assert_eq!(st.step, 0);
        assert_eq!(p.tensors_mut()[0].data(), &[2.0]);
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0], vec![4.0]];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }
}
