use serde::{Deserialize, Serialize};

/// `base × factor^floor(epoch / period)`.
pub fn step_lr(epoch: u32, base: f64, factor: f64, period: u32) -> f64 {
    let k = epoch / period.max(1);
    base * factor.powi(k as i32)
}

/// Triangular cyclical rate: rises linearly from `lr_min` at the start of each
/// period to `lr_max` at the half-period, then falls back.
pub fn cyclical_lr(iter: u64, lr_min: f64, lr_max: f64, period: u64) -> f64 {
    let period = period.max(2);
    let pos = (iter % period) as f64;
    let half = period as f64 / 2.0;
    let t = if pos <= half { pos / half } else { (period as f64 - pos) / half };
    lr_min * (1.0 - t) + lr_max * t
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LrSchedule {
    StepDecay { base: f64, factor: f64, period_epochs: u32 },
    Cyclical { min: f64, max: f64, period_iters: u64 },
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule::StepDecay { base: lr, factor: 1.0, period_epochs: 1 }
    }

    /// Rate for a given epoch and global iteration; each variant reads the
    /// counter it is defined over.
    pub fn rate(&self, epoch: u32, iter: u64) -> f64 {
        match *self {
            LrSchedule::StepDecay { base, factor, period_epochs } => step_lr(epoch, base, factor, period_epochs),
            LrSchedule::Cyclical { min, max, period_iters } => cyclical_lr(iter, min, max, period_iters),
        }
    }

    pub fn is_valid(&self) -> bool {
        match *self {
            LrSchedule::StepDecay { base, factor, period_epochs } => base > 0.0 && factor > 0.0 && period_epochs >= 1,
            LrSchedule::Cyclical { min, max, period_iters } => min > 0.0 && min < max && period_iters >= 2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn step_recipes() {
        assert_eq!(step_lr(0, 0.001, 0.1, 10), 0.001);
        assert_eq!(step_lr(9, 0.001, 0.1, 10), 0.001);
        assert_eq!(step_lr(10, 0.001, 0.1, 10), 1e-4);
        assert_eq!(step_lr(29, 0.002, 0.1, 15), 2e-4);
        assert_eq!(step_lr(14, 0.002, 0.1, 15), 0.002);
    }

    #[test]
    fn cyclical_endpoints() {
        assert_eq!(cyclical_lr(0, 1e-4, 1e-2, 100), 1e-4);
        assert_eq!(cyclical_lr(50, 1e-4, 1e-2, 100), 1e-2);
        assert_eq!(cyclical_lr(100, 1e-4, 1e-2, 100), 1e-4);
        let q = cyclical_lr(25, 1e-4, 1e-2, 100);
        assert!((q - (1e-4 + 1e-2) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn constant_schedule() {
        let s = LrSchedule::constant(0.01);
        assert!((0..50).all(|e| s.rate(e, 0) == 0.01));
    }

    proptest! {
        #[test]
        fn cyclical_is_periodic_and_bounded(iter in 0u64..100_000, period in 2u64..500) {
            let a = cyclical_lr(iter, 1e-4, 1e-2, period);
            prop_assert_eq!(a, cyclical_lr(iter + period, 1e-4, 1e-2, period));
            prop_assert!(a >= 1e-4 * (1.0 - 1e-12) && a <= 1e-2 * (1.0 + 1e-12));
        }

        #[test]
        fn step_lr_is_non_increasing_for_decay(epoch in 0u32..200, period in 1u32..20) {
            prop_assert!(step_lr(epoch + 1, 0.01, 0.1, period) <= step_lr(epoch, 0.01, 0.1, period));
        }
    }
}
