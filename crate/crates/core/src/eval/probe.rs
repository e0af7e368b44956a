use serde::{Deserialize, Serialize};

use super::EvalError;

pub const DEFAULT_REG: f64 = 1.0;
pub const GRAD_TOL: f64 = 1e-6;
pub const MAX_ITERS: usize = 10_000;

/// Logistic regression on standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

struct Problem<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    reg: f64,
}

impl Problem<'_> {
    /// Gradient of `sum_i logloss_i + reg/2 |w|^2` (bias unregularized);
    /// the bias gradient is last.
    fn grad(&self, theta: &[f64], out: &mut [f64]) {
        let d = theta.len() - 1;
        out.iter_mut().for_each(|g| *g = 0.0);
        for (xi, &yi) in self.x.iter().zip(self.y) {
            let z = theta[d] + xi.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>();
            let r = sigmoid(z) - yi;
            for (g, a) in out.iter_mut().zip(xi) {
                *g += r * a;
            }
            out[d] += r;
        }
        for j in 0..d {
            out[j] += self.reg * theta[j];
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl LinearProbe {
    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn decision(&self, x: &[f64]) -> f64 {
        let z = self.standardize(x);
        self.bias + z.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        self.decision(x) > 0.0
    }

    pub fn predict_all(&self, xs: &[Vec<f64>]) -> Vec<bool> {
        xs.iter().map(|x| self.predict(x)).collect()
    }
}

/// L2-regularized logistic regression by full-batch accelerated gradient
/// descent until the gradient norm is below 1e-6 or 10000 iterations.
///
/// Features are standardized with the training mean and standard deviation;
/// constant features are centered only.
pub fn fit_probe(features: &[Vec<f64>], labels: &[bool], reg: f64) -> Result<LinearProbe, EvalError> {
    let n = features.len();
    if n == 0 || n != labels.len() {
        return Err(EvalError::Probe(format!("{n} feature rows for {} labels", labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == n {
        return Err(EvalError::SingleClass);
    }
    if !(reg > 0.0) {
        return Err(EvalError::Probe(format!("regularization {reg} must be positive")));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(EvalError::Probe("ragged feature rows".into()));
    }
    let mean: Vec<f64> = (0..d).map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n as f64).collect();
    let scale: Vec<f64> = (0..d)
        .map(|j| {
            let var = features.iter().map(|f| (f[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
            let sd = var.sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    let mut probe = LinearProbe {
        mean,
        scale,
        weights: vec![0.0; d],
        bias: 0.0,
        iterations: 0,
        grad_norm: f64::INFINITY,
    };
    let x: Vec<Vec<f64>> = features.iter().map(|f| probe.standardize(f)).collect();
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    let prob = Problem { x: &x, y: &y, reg };

    // Lipschitz bound of the gradient: (||X~||_F^2) / 4 + reg, X~ with a ones column.
    let frob: f64 = x.iter().map(|r| 1.0 + r.iter().map(|v| v * v).sum::<f64>()).sum();
    let step = 1.0 / (frob / 4.0 + reg);

    let mut theta = vec![0.0; d + 1];
    let mut prev = theta.clone();
    let mut look = theta.clone();
    let mut g = vec![0.0; d + 1];
    let mut t = 1.0f64;
    for it in 0..MAX_ITERS {
        prob.grad(&theta, &mut g);
        let gn = norm(&g);
        probe.iterations = it;
        probe.grad_norm = gn;
        if gn < GRAD_TOL {
            break;
        }
        prob.grad(&look, &mut g);
        let next: Vec<f64> = look.iter().zip(&g).map(|(a, b)| a - step * b).collect();
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let momentum = (t - 1.0) / t_next;
        // adaptive restart when the step goes against the momentum direction
        let restart = g
            .iter()
            .zip(next.iter().zip(&theta))
            .map(|(gi, (n, o))| gi * (n - o))
            .sum::<f64>()
            > 0.0;
        prev.copy_from_slice(&theta);
        theta = next;
        if restart {
            t = 1.0;
            look.copy_from_slice(&theta);
        } else {
            for j in 0..=d {
                look[j] = theta[j] + momentum * (theta[j] - prev[j]);
            }
            t = t_next;
        }
    }
    prob.grad(&theta, &mut g);
    probe.grad_norm = norm(&g);
    probe.bias = theta[d];
    probe.weights = theta[..d].to_vec();
    Ok(probe)
}
