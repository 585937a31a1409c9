//! Adam with bias-corrected moments, plus global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, shapes: &[&[usize]]) -> Self {
        Self {
            config,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// One update: `θ ← θ − lr · m̂ / (√v̂ + eps)`.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dim("adam: parameter/gradient count mismatch"));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::dim(format!("adam: gradient {k} has the wrong shape")));
            }
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
            p.check_finite("adam update")?;
        }
        Ok(())
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_parameter_recurrence_by_hand() {
        // θ0 = 1, g = 0.5 for two steps, lr = 0.1.
        // step 1: m = 0.05, v = 0.00025, m̂ = 0.5, v̂ = 0.25 → θ = 1 − 0.1·0.5/(0.5+1e-8)
        // step 2: m = 0.095, v = 0.00049975, m̂ = 0.5, v̂ = 0.25 → same decrement again
        let mut p = Tensor::scalar(1.0);
        let g = Tensor::scalar(0.5);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &[&[1]]);
        adam.update(&mut [&mut p], std::slice::from_ref(&g)).unwrap();
        let step = 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p.item() - (1.0 - step)).abs() < 1e-15);
        assert!((adam.m[0].item() - 0.05).abs() < 1e-15);
        assert!((adam.v[0].item() - 0.00025).abs() < 1e-18);
        adam.update(&mut [&mut p], std::slice::from_ref(&g)).unwrap();
        let m2: f64 = 0.9 * 0.05 + 0.1 * 0.5;
        let v2: f64 = 0.999 * 0.00025 + 0.001 * 0.25;
        let mhat = m2 / (1.0 - 0.81);
        let vhat = v2 / (1.0 - 0.999f64.powi(2));
        let expected = 1.0 - step - 0.1 * mhat / (vhat.sqrt() + 1e-8);
        assert!((p.item() - expected).abs() < 1e-14);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = Tensor::new(&[2], vec![0.3, -0.7]).unwrap();
        let before = p.clone();
        let mut adam = Adam::new(AdamConfig::with_lr(0.0), &[&[2]]);
        adam.update(&mut [&mut p], &[Tensor::new(&[2], vec![5.0, -1.0]).unwrap()])
            .unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Tensor::new(&[2], vec![3.0, 4.0]).unwrap(), Tensor::scalar(0.0)];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        let mut small = vec![Tensor::scalar(0.5)];
        assert_eq!(clip_global_norm(&mut small, 1.0), 0.5);
        assert_eq!(small[0].item(), 0.5);
    }
}
