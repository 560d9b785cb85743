use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Linear warmup to `peak_lr`, then cosine decay to `min_lr_fraction·peak_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub total_steps: u64,
    pub min_lr_fraction: f64,
}

impl Schedule {
    pub const PEAK_LR: f64 = 2e-4;

    pub fn new(peak_lr: f64, total_steps: u64) -> Self {
        Schedule {
            peak_lr,
            warmup_fraction: 0.10,
            total_steps,
            min_lr_fraction: 0.10,
        }
    }

    /// Full-scale pre-training: 200,000 steps peaking at 2e-4.
    pub fn pretraining() -> Self {
        Self::new(Self::PEAK_LR, 200_000)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.peak_lr > 0.0, "peak learning rate must be positive");
        ensure!(
            (0.0..=1.0).contains(&self.warmup_fraction),
            "warmup fraction {} outside [0, 1]",
            self.warmup_fraction
        );
        ensure!(
            (0.0..=1.0).contains(&self.min_lr_fraction),
            "minimum lr fraction {} outside [0, 1]",
            self.min_lr_fraction
        );
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_fraction * self.total_steps as f64).round() as u64
    }

    pub fn min_lr(&self) -> f64 {
        self.min_lr_fraction * self.peak_lr
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        ensure!(
            step <= self.total_steps,
            "step {step} beyond schedule length {}",
            self.total_steps
        );
        let w = self.warmup_steps();
        if step <= w && w > 0 {
            return Ok(self.peak_lr * (step as f64 / w as f64));
        }
        let span = self.total_steps - w;
        let progress = if span == 0 {
            1.0
        } else {
            (step - w) as f64 / span as f64
        };
        let min = self.min_lr();
        Ok(min + (self.peak_lr - min) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_exact() {
        let s = Schedule::pretraining();
        assert_eq!(s.warmup_steps(), 20_000);
        assert_eq!(s.lr_at(20_000).unwrap(), 2e-4);
        assert_eq!(s.lr_at(200_000).unwrap(), s.min_lr_fraction * s.peak_lr);
        assert!((s.lr_at(200_000).unwrap() - 2e-5).abs() < 1e-20);
        assert_eq!(s.lr_at(10_000).unwrap(), 1e-4);
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert!(s.lr_at(200_001).is_err());
    }

    #[test]
    fn continuous_and_monotone_after_warmup() {
        let s = Schedule::new(1e-3, 1000);
        let mut prev = s.lr_at(100).unwrap();
        for step in 101..=1000 {
            let lr = s.lr_at(step).unwrap();
            assert!(lr <= prev && prev - lr < 1e-5);
            prev = lr;
        }
        for step in 1..=100 {
            assert!(s.lr_at(step).unwrap() - s.lr_at(step - 1).unwrap() <= 1e-5 + 1e-15);
        }
    }

    #[test]
    fn no_warmup() {
        let mut s = Schedule::new(1e-3, 10);
        s.warmup_fraction = 0.0;
        assert_eq!(s.lr_at(0).unwrap(), 1e-3);
        assert_eq!(s.lr_at(10).unwrap(), s.min_lr());
    }
}
