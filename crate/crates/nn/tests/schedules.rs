use kneexr_nn::schedule::{cyclical_lr, step_lr};
use kneexr_nn::LrSchedule;
use proptest::prelude::*;

#[test]
fn step_decay_tabulation() {
    let joint: Vec<f64> = [0, 9, 10, 19, 20].iter().map(|&e| step_lr(e, 0.001, 0.1, 10)).collect();
    assert_eq!(joint[..2], [0.001, 0.001]);
    assert!((joint[2] - 1e-4).abs() < 1e-18 && (joint[3] - 1e-4).abs() < 1e-18);
    assert!((joint[4] - 1e-5).abs() < 1e-19);
    assert_eq!(step_lr(14, 0.002, 0.1, 15), 0.002);
    assert!((step_lr(15, 0.002, 0.1, 15) - 2e-4).abs() < 1e-18);
    assert!((step_lr(29, 0.002, 0.1, 15) - 2e-4).abs() < 1e-18);
}

#[test]
fn cyclical_endpoints() {
    assert_eq!(cyclical_lr(0, 1e-4, 1e-2, 200), 1e-4);
    assert_eq!(cyclical_lr(100, 1e-4, 1e-2, 200), 1e-2);
    assert_eq!(cyclical_lr(200, 1e-4, 1e-2, 200), 1e-4);
    let s = LrSchedule::Cyclical { min: 1e-4, max: 1e-2, period_iters: 200 };
    assert_eq!(s.rate(7, 100), 1e-2);
    assert!(!LrSchedule::Cyclical { min: 1e-2, max: 1e-4, period_iters: 200 }.is_valid());
}

proptest! {
    #[test]
    fn cyclical_is_periodic_and_bounded(i in 0u64..1_000_000, k in 1u64..50, period in 2u64..1000) {
        let a = cyclical_lr(i, 1e-4, 1e-2, period);
        prop_assert_eq!(a, cyclical_lr(i + k * period, 1e-4, 1e-2, period));
        prop_assert!((1e-4..=1e-2).contains(&a));
    }

    #[test]
    fn step_decay_is_non_increasing(e in 0u32..500, period in 1u32..40) {
        prop_assert!(step_lr(e + 1, 0.001, 0.1, period) <= step_lr(e, 0.001, 0.1, period));
    }
}
