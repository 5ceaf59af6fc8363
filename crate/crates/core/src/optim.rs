//! AdamW with decoupled weight decay, and the warmup-plus-cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{AmpError, Result};
use crate::tensor::Tensor;

/// Optimizer and schedule settings shared by distillation and teacher
/// training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    /// Settings used for the OpenCLIP-g backbone.
    fn default() -> Self {
        DistillConfig {
            epochs: 10,
            warmup_epochs: 1,
            base_lr: 5e-5,
            min_lr: 1e-7,
            batch_size: 512,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.95,
            seed: 0,
        }
    }
}

impl DistillConfig {
    /// `base_lr × batch_size / 256`
    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(AmpError::Config("batch_size must be positive".into()));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(AmpError::Config(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.peak_lr()) {
            return Err(AmpError::Config(format!(
                "min_lr {} must lie in [0, {}]",
                self.min_lr,
                self.peak_lr()
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(AmpError::Config("betas must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(AmpError::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Learning rate at optimizer step `step` (0-based).
///
/// Linear warmup `lr · step / W` over the first `W = warmup_epochs ·
/// steps_per_epoch` steps, then cosine decay from `lr` at step `W` to
/// `min_lr` at the final step `T − 1`.
pub fn lr_at(config: &DistillConfig, step: usize, steps_per_epoch: usize) -> f64 {
    let peak = config.peak_lr();
    let warmup = config.warmup_epochs * steps_per_epoch;
    let total = config.epochs * steps_per_epoch;
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let last = total.saturating_sub(1);
    if step >= last {
        return config.min_lr;
    }
    let progress = (step - warmup) as f64 / (last - warmup) as f64;
    config.min_lr + (peak - config.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn from_config(config: &DistillConfig) -> Self {
        Self::new(config.beta1, config.beta2, config.weight_decay)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter with its gradient at learning rate `lr`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], lr: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.shape(), g.shape(), "gradient shape for parameter {i}");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                *w -= lr * (update + self.weight_decay * *w);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> DistillConfig {
        DistillConfig {
            epochs: 10,
            warmup_epochs: 1,
            base_lr: 1e-3,
            min_lr: 1e-6,
            batch_size: 128,
            ..Default::default()
        }
    }

    #[test]
    fn schedule_landmarks() {
        let c = cfg();
        let spe = 7;
        let peak = 1e-3 * 128.0 / 256.0;
        assert_eq!(lr_at(&c, 0, spe), 0.0);
        assert_eq!(lr_at(&c, spe, spe), peak);
        assert_eq!(lr_at(&c, 10 * spe - 1, spe), 1e-6);
        // decay runs from step 7 to step 69; its midpoint is step 38
        assert!((lr_at(&c, 38, spe) - (peak + 1e-6) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn schedule_is_continuous_at_boundary() {
        let c = cfg();
        let spe = 1000;
        let before = lr_at(&c, spe - 1, spe);
        let at = lr_at(&c, spe, spe);
        assert!((at - before).abs() <= c.peak_lr() / spe as f64 + 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig::default().validate().is_ok());
        let mut c = cfg();
        c.warmup_epochs = 10;
        assert!(c.validate().is_err());
        c.warmup_epochs = 0;
        c.min_lr = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        let g = Tensor::new(vec![2], vec![0.5, -2.0]).unwrap();
        let mut opt = AdamW::new(0.9, 0.95, 0.0);
        opt.step(&mut [&mut p], &[&g], 0.1);
        // bias-corrected first step is lr · sign(g)
        assert!((p.data()[0] - 0.9).abs() < 1e-7);
        assert!((p.data()[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        let mut p = Tensor::new(vec![3], vec![0.3, -0.2, 7.0]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros(&[3]);
        let mut opt = AdamW::new(0.9, 0.95, 0.0);
        for _ in 0..5 {
            opt.step(&mut [&mut p], &[&g], 0.1);
        }
        assert!(p.bit_eq(&before));
    }
}
