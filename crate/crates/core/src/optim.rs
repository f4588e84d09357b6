use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optimisation settings shared by prior training, distillation and the
/// classifier/probe fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Passes over the training set; one optimizer step per mini-batch.
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning rate at the last step as a fraction of `lr` (cosine decay);
    /// `1.0` keeps it constant.
    pub final_lr_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            lr: 2e-4,
            batch: 8,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
            final_lr_fraction: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.batch >= 1
            && (0.0..=1.0).contains(&self.final_lr_fraction);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid train config {self:?}")))
        }
    }

    /// Learning rate for optimizer step `step` (0-based) out of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if self.final_lr_fraction >= 1.0 || total <= 1 {
            return self.lr;
        }
        let progress = step as f64 / (total - 1) as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * (self.final_lr_fraction + (1.0 - self.final_lr_fraction) * cosine)
    }
}

/// Bias-corrected Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(params: usize) -> Self {
        Adam {
            m: vec![0.0; params],
            v: vec![0.0; params],
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], cfg: &TrainConfig) -> Result<()> {
        self.step_with_lr(params, grads, cfg, cfg.lr)
    }

    pub fn step_with_lr(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        cfg: &TrainConfig,
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::shape(
                format!("{} parameters", self.m.len()),
                format!("{} params / {} grads", params.len(), grads.len()),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let cfg = TrainConfig::default();
        let mut adam = Adam::new(3);
        let mut p = vec![1.0, -2.0, 0.5];
        adam.step(&mut p, &[0.0; 3], &cfg).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(adam.steps_taken(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = TrainConfig {
            lr: 0.01,
            ..TrainConfig::default()
        };
        for g in [1e-3, -4.0, 250.0] {
            let mut adam = Adam::new(1);
            let mut p = vec![0.0];
            adam.step(&mut p, &[g], &cfg).unwrap();
            // m_hat = g, v_hat = g^2 at step one
            let expected = -cfg.lr * g / (g.abs() + cfg.eps);
            assert!((p[0] - expected).abs() < 1e-15);
            assert!((p[0].abs() - cfg.lr).abs() < 1e-6);
        }
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        for (beta1, beta2) in [(0.5, 0.9), (0.9, 0.999)] {
            let cfg = TrainConfig {
                lr: 0.1,
                beta1,
                beta2,
                ..TrainConfig::default()
            };
            let mut adam = Adam::new(1);
            let mut w = vec![0.0];
            // independent scalar recurrence
            let (mut wr, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
            for i in 1..=200 {
                let g = 2.0 * (w[0] - 3.0);
                adam.step(&mut w, &[g], &cfg).unwrap();
                let gr = 2.0 * (wr - 3.0);
                m = beta1 * m + (1.0 - beta1) * gr;
                v = beta2 * v + (1.0 - beta2) * gr * gr;
                wr -= 0.1 * (m / (1.0 - beta1.powi(i))) / ((v / (1.0 - beta2.powi(i))).sqrt() + 1e-8);
            }
            assert!((w[0] - 3.0).abs() < 0.05, "w = {}", w[0]);
            assert!((w[0] - wr).abs() < 1e-12);
        }
    }

    #[test]
    fn length_mismatch() {
        let mut adam = Adam::new(2);
        let mut p = vec![0.0; 2];
        assert!(adam
            .step(&mut p, &[1.0], &TrainConfig::default())
            .is_err());
    }

    #[test]
    fn cosine_decay_endpoints() {
        let cfg = TrainConfig {
            lr: 1.0,
            final_lr_fraction: 0.1,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0, 11), 1.0);
        assert!((cfg.lr_at(10, 11) - 0.1).abs() < 1e-12);
        assert!(TrainConfig { lr: 0.0, ..cfg.clone() }.validate().is_err());
    }
}
