//! AdamW optimizer with decoupled weight decay and bias-corrected moments.

use crate::error::{HartError, Result};
use crate::num::tensor::Tensor;

pub struct AdamW {
    params: Vec<Tensor>,
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    weight_decay: f32,
    step_count: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(
        params: Vec<Tensor>,
        lr: f32,
        betas: (f32, f32),
        weight_decay: f32,
    ) -> Result<AdamW> {
        if lr <= 0.0 {
            return Err(HartError::arg("lr", format!("must be positive, got {lr}")));
        }
        let m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Ok(AdamW {
            params,
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            m,
            v,
        })
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    /// One update over all registered parameters. Parameters without a
    /// gradient are treated as having a zero gradient.
    pub fn step(&mut self) {
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for (idx, p) in self.params.iter().enumerate() {
            let grad = p.grad();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let (lr, b1, b2, eps, wd) = (self.lr, self.beta1, self.beta2, self.eps, self.weight_decay);
            p.update_data(|data| {
                for i in 0..data.len() {
                    let g = grad.as_ref().map_or(0.0, |g| g[i]);
                    m[i] = b1 * m[i] + (1.0 - b1) * g;
                    v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    data[i] -= lr * (mhat / (vhat.sqrt() + eps) + wd * data[i]);
                }
            });
        }
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_positive_lr() {
        assert!(AdamW::new(vec![], 0.0, (0.9, 0.999), 0.0).is_err());
        assert!(AdamW::new(vec![], -1.0, (0.9, 0.999), 0.0).is_err());
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params_unchanged() {
        let p = Tensor::from_vec(vec![1.5, -2.5], &[2]).requires_grad(true);
        let mut opt = AdamW::new(vec![p.clone()], 0.1, (0.9, 0.999), 0.0).unwrap();
        opt.step();
        opt.step();
        assert_eq!(p.to_vec(), vec![1.5, -2.5]);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        let p = Tensor::from_vec(vec![1.0], &[1]).requires_grad(true);
        p.accumulate_grad(&[0.5]);
        let mut opt = AdamW::new(vec![p.clone()], 0.1, (0.9, 0.999), 0.1).unwrap();
        opt.step();
        // m=0.05, v=0.00025, mhat=0.5, vhat=0.25
        // p = 1 - 0.1*(0.5/(0.5+1e-8) + 0.1*1.0)
        let expected = 1.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.1);
        assert!((p.item() - expected).abs() < 1e-7, "{} vs {expected}", p.item());
    }

    #[test]
    fn quadratic_bowl_converges() {
        use crate::num::{ops, tape};
        let x = Tensor::from_vec(vec![3.0, -4.0], &[2]).requires_grad(true);
        let mut opt = AdamW::new(vec![x.clone()], 0.05, (0.9, 0.999), 0.0).unwrap();
        for _ in 0..500 {
            tape::reset();
            opt.zero_grad();
            let sq = ops::mul(&x, &x).unwrap();
            let loss = ops::sum_all(&sq);
            tape::backward(&loss).unwrap();
            opt.step();
        }
        for v in x.to_vec() {
            assert!(v.abs() < 1e-3, "did not converge: {v}");
        }
    }
}
