use kneexr_core::{argmax_low, NUM_GRADES};
use kneexr_models::{fuse, GradePrediction};
use proptest::prelude::*;

fn distribution() -> impl Strategy<Value = [f64; NUM_GRADES]> {
    prop::array::uniform4(0.0f64..1.0).prop_filter("non-zero mass", |v| v.iter().sum::<f64>() > 1e-3).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.map(|x| x / s)
    })
}

fn weights() -> impl Strategy<Value = [f64; 3]> {
    prop::array::uniform3(0.0f64..1.0).prop_filter("non-zero", |w| w.iter().sum::<f64>() > 1e-3).prop_map(|w| {
        let s: f64 = w.iter().sum();
        w.map(|x| x / s)
    })
}

/// Straight weighted mean, written out without the library.
fn oracle(m: &[[f64; NUM_GRADES]; 3], w: &[f64; 3]) -> [f64; NUM_GRADES] {
    let mut out = [0.0; NUM_GRADES];
    for g in 0..NUM_GRADES {
        out[g] = w[0] * m[0][g] + w[1] * m[1][g] + w[2] * m[2][g];
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn fused_is_normalized_weighted_mean(m in prop::array::uniform3(distribution()), w in weights()) {
        let f = fuse(&m, &w).unwrap();
        let o = oracle(&m, &w);
        for g in 0..NUM_GRADES {
            prop_assert!((f[g] - o[g]).abs() < 1e-12);
            prop_assert!(f[g] >= 0.0);
        }
        prop_assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn permutation_invariance(m in prop::array::uniform3(distribution()), w in weights(), perm in 0usize..6) {
        let order = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]][perm];
        let pm: Vec<_> = order.iter().map(|&i| m[i]).collect();
        let pw: Vec<_> = order.iter().map(|&i| w[i]).collect();
        let a = fuse(&m, &w).unwrap();
        let b = fuse(&pm, &pw).unwrap();
        for g in 0..NUM_GRADES {
            prop_assert!((a[g] - b[g]).abs() < 1e-12);
        }
    }

    #[test]
    fn convex_hull_containment(m in prop::array::uniform3(distribution()), w in weights()) {
        let f = fuse(&m, &w).unwrap();
        for g in 0..NUM_GRADES {
            let lo = m.iter().map(|v| v[g]).fold(f64::INFINITY, f64::min);
            let hi = m.iter().map(|v| v[g]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(f[g] >= lo - 1e-12 && f[g] <= hi + 1e-12);
        }
    }

    #[test]
    fn weight_scaling_keeps_the_grade(m in prop::array::uniform3(distribution()), w in weights(), c in 1e-3f64..1e3) {
        let a = GradePrediction::from_members(m.to_vec(), &w).unwrap();
        let scaled = w.map(|x| x * c);
        let b = GradePrediction::from_members(m.to_vec(), &scaled).unwrap();
        let o = oracle(&m, &w);
        // Only compare where the oracle's top two grades are separated beyond rounding.
        let mut sorted = o;
        sorted.sort_by(|x, y| y.total_cmp(x));
        if sorted[0] - sorted[1] > 1e-9 {
            prop_assert_eq!(a.grade, b.grade);
            prop_assert_eq!(a.grade as usize, argmax_low(&o));
        }
        prop_assert!((a.confidence - a.fused[a.grade as usize]).abs() == 0.0);
    }
}

#[test]
fn fusion_examples() {
    let one_hot = |g: usize| {
        let mut v = [0.0; NUM_GRADES];
        v[g] = 1.0;
        v
    };
    let p = GradePrediction::from_members(vec![one_hot(0), one_hot(1), one_hot(1)], &[0.2, 0.4, 0.4]).unwrap();
    assert!((p.fused[0] - 0.2).abs() < 1e-12 && (p.fused[1] - 0.8).abs() < 1e-12);
    assert_eq!(p.grade, 1);

    let v = [0.1, 0.2, 0.3, 0.4];
    assert_eq!(fuse(&[v, v, v], &[1.0 / 3.0; 3]).unwrap().map(|x| (x * 1e9).round()), v.map(|x| (x * 1e9).round()));
    assert_eq!(fuse(&[v, one_hot(0), one_hot(3)], &[1.0, 0.0, 0.0]).unwrap(), v);
    assert!(fuse(&[v, v, v], &[0.5, 0.6, -0.1]).is_err());
    let u = [0.25; NUM_GRADES];
    assert_eq!(GradePrediction::from_members(vec![u, u, u], &[1.0 / 3.0; 3]).unwrap().grade, 0);
}
