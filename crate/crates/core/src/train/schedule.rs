//! Linear warm-up followed by "poly" decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub max_iters: usize,
    #[serde(default = "default_power")]
    pub power: f64,
    #[serde(default)]
    pub warmup_iters: usize,
    #[serde(default = "default_warmup_start")]
    pub warmup_start_factor: f64,
}

fn default_power() -> f64 {
    0.9
}

fn default_warmup_start() -> f64 {
    0.1
}

impl ScheduleConfig {
    /// Poly decay with power 0.9 and a linear warm-up over the first 1% of
    /// iterations starting from a tenth of the base rate.
    pub fn standard(base_lr: f64, max_iters: usize) -> Self {
        ScheduleConfig {
            base_lr,
            max_iters,
            power: default_power(),
            warmup_iters: max_iters / 100,
            warmup_start_factor: default_warmup_start(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("schedule max_iters must be positive".into()));
        }
        if self.warmup_iters >= self.max_iters {
            return Err(Error::Config(format!(
                "warmup_iters ({}) must be below max_iters ({})",
                self.warmup_iters, self.max_iters
            )));
        }
        if self.power <= 0.0 {
            return Err(Error::Config("poly power must be positive".into()));
        }
        if self.base_lr < 0.0 || !self.base_lr.is_finite() {
            return Err(Error::Config("base_lr must be a finite non-negative number".into()));
        }
        Ok(())
    }

    /// Learning rate at `iter` (clamped to `max_iters`).
    pub fn lr(&self, iter: usize) -> f64 {
        poly_lr(iter, self)
    }
}

/// Warm-up ramps linearly from `warmup_start_factor * base` to `base`; after
/// it the rate is `base * (1 - t/T)^power` with `t` and `T` counted from the
/// end of warm-up, so the curve is continuous and reaches zero at `max_iters`.
pub fn poly_lr(iter: usize, cfg: &ScheduleConfig) -> f64 {
    let iter = iter.min(cfg.max_iters);
    if iter < cfg.warmup_iters {
        let f = cfg.warmup_start_factor;
        return cfg.base_lr * (f + (1.0 - f) * iter as f64 / cfg.warmup_iters as f64);
    }
    let span = (cfg.max_iters - cfg.warmup_iters) as f64;
    let progress = (iter - cfg.warmup_iters) as f64 / span;
    cfg.base_lr * (1.0 - progress).powf(cfg.power)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        let cfg = ScheduleConfig::standard(0.01, 1000);
        assert_eq!(cfg.warmup_iters, 10);
        assert!((cfg.lr(0) - 0.001).abs() < 1e-15);
        assert_eq!(cfg.lr(10), 0.01);
        assert_eq!(cfg.lr(1000), 0.0);
    }

    #[test]
    fn rejects_bad_warmup() {
        let mut cfg = ScheduleConfig::standard(0.01, 10);
        cfg.warmup_iters = 10;
        assert!(cfg.validate().is_err());
    }
}
