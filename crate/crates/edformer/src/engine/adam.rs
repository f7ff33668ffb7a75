//! Adam optimizer with bias correction.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Per-parameter first/second moment buffers plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Defaults beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn new(lr: f64, param_sizes: &[usize]) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64, eps: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self.eps = eps;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One Adam update over `params`, reading each tensor's materialized
    /// gradient (a missing gradient is treated as zero).
    pub fn step(&mut self, params: &mut [Tensor]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: vec![self.m.len()],
                rhs: vec![params.len()],
            });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            if self.m[i].len() != p.numel() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: vec![self.m[i].len()],
                    rhs: p.shape().to_vec(),
                });
            }
            let grad: Vec<f64> = p.grad().map(<[f64]>::to_vec).unwrap_or_default();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let data = p.data_mut();
            for j in 0..data.len() {
                let g = grad.get(j).copied().unwrap_or(0.0);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: &[f64]) -> Tensor {
        Tensor::new(vec![values.len()], values.to_vec())
            .unwrap()
            .requires_grad()
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = param(&[1.0, -2.0, 3.0]);
        p.set_grad(vec![0.0; 3]).unwrap();
        let mut adam = AdamState::new(0.1, &[3]);
        adam.step(&mut std::slice::from_mut(&mut p)).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // With bias correction, m_hat / sqrt(v_hat) = g / |g| at t = 1.
        let mut p = param(&[0.5, 0.5]);
        p.set_grad(vec![3.0, -0.25]).unwrap();
        let lr = 1e-2;
        let mut adam = AdamState::new(lr, &[2]);
        adam.step(&mut std::slice::from_mut(&mut p)).unwrap();
        let expect = [0.5 - lr, 0.5 + lr];
        for (got, want) in p.data().iter().zip(expect) {
            assert!((got - want).abs() / want.abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn matches_scalar_recurrence_for_two_steps() {
        // independent scalar oracle of the Adam recurrences
        let (beta1, beta2, eps, lr): (f64, f64, f64, f64) = (0.9, 0.999, 1e-8, 0.05);
        let g = 0.7;
        let mut theta = 1.25;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2u32 {
            m = beta1 * m + (1.0 - beta1) * g;
            v = beta2 * v + (1.0 - beta2) * g * g;
            let m_hat = m / (1.0 - beta1.powi(t as i32));
            let v_hat = v / (1.0 - beta2.powi(t as i32));
            theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }

        let mut p = param(&[1.25]);
        let mut adam = AdamState::new(lr, &[1]);
        for _ in 0..2 {
            p.set_grad(vec![g]).unwrap();
            adam.step(&mut std::slice::from_mut(&mut p)).unwrap();
        }
        assert!((p.data()[0] - theta).abs() < 1e-15, "{} vs {theta}", p.data()[0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = param(&[1.0, 2.0]);
        let mut adam = AdamState::new(0.1, &[3]);
        assert!(adam.step(&mut std::slice::from_mut(&mut p)).is_err());
    }
}
