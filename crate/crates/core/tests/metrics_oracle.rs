use std::collections::BTreeMap;

use kneexr_core::domain::*;
use kneexr_core::ingest::StratumKey;
use kneexr_core::metrics::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent tally and formulas used as the oracle.
fn brute(pairs: &[(bool, bool)]) -> [f64; 4] {
    let c = |p: bool, a: bool| pairs.iter().filter(|&&x| x == (p, a)).count() as f64;
    [c(true, true), c(true, false), c(false, false), c(false, true)]
}

fn oracle(m: Metric, [tp, fp, tn, fnn]: [f64; 4]) -> Option<f64> {
    let div = |a: f64, b: f64| if b == 0.0 { None } else { Some(a / b) };
    match m {
        Metric::Precision => div(tp, tp + fp),
        Metric::Recall | Metric::Sensitivity => div(tp, tp + fnn),
        Metric::Npv => div(tn, tn + fnn),
        Metric::Specificity => div(tn, tn + fp),
        Metric::Accuracy => div(tp + tn, tp + fp + tn + fnn),
        Metric::F1 => {
            let p = div(tp, tp + fp)?;
            let r = div(tp, tp + fnn)?;
            Some(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
        }
    }
}

#[test]
fn thousand_random_pairs_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for round in 0..20 {
        let bias = rng.gen_range(0.05..0.95);
        let pairs: Vec<(bool, bool)> = (0..1000).map(|_| (rng.gen_bool(bias), rng.gen_bool(0.5))).collect();
        let cm = pairs.iter().fold(ConfusionMatrix::default(), |cm, &(p, a)| cm.accumulate(p, a));
        let b = brute(&pairs);
        assert_eq!([cm.tp, cm.fp, cm.tn, cm.fn_].map(|v| v as f64), b, "round {round}");
        for m in Metric::ALL {
            match (m.value(&cm), oracle(m, b)) {
                (Ok(v), Some(w)) => assert!((v - w).abs() <= 1e-12, "{m:?}: {v} vs {w}"),
                (Err(_), None) => {}
                (got, want) => panic!("{m:?}: {got:?} vs {want:?}"),
            }
        }
    }
}

#[test]
fn naive_percentage_averaging_differs_from_summed_counts() {
    let a = ConfusionMatrix::new(9, 1, 0, 0);
    let b = ConfusionMatrix::new(1, 9, 0, 0);
    let merged = precision(&(a + b)).unwrap();
    let averaged = (precision(&a).unwrap() + precision(&b).unwrap()) / 2.0;
    assert_eq!(merged, 0.5);
    assert_eq!(averaged, 0.5);
    let c = ConfusionMatrix::new(90, 10, 0, 0);
    let merged = precision(&(c + b)).unwrap();
    let averaged = (precision(&c).unwrap() + precision(&b).unwrap()) / 2.0;
    assert!((merged - 91.0 / 110.0).abs() < 1e-15);
    assert!((averaged - merged).abs() > 0.1);
}

/// Exhaustive search over injective assignments that respect the greedy
/// order: returns the matched count of the best assignment.
fn max_matching(preds: &[BoundingBox], gts: &[BoundingBox], thr: f64) -> usize {
    fn go(i: usize, preds: &[BoundingBox], gts: &[BoundingBox], used: &mut Vec<bool>, thr: f64) -> usize {
        if i == preds.len() {
            return 0;
        }
        let mut best = go(i + 1, preds, gts, used, thr);
        for j in 0..gts.len() {
            if !used[j] && iou(&preds[i], &gts[j]) >= thr {
                used[j] = true;
                best = best.max(1 + go(i + 1, preds, gts, used, thr));
                used[j] = false;
            }
        }
        best
    }
    go(0, preds, gts, &mut vec![false; gts.len()], thr)
}

#[test]
fn three_predictions_two_truths() {
    let gts = vec![BoundingBox::new(0.0, 0.0, 10.0, 10.0), BoundingBox::new(30.0, 0.0, 40.0, 10.0)];
    let preds = vec![BoundingBox::new(1.0, 1.0, 11.0, 11.0), BoundingBox::new(31.0, 0.0, 41.0, 10.0), BoundingBox::new(0.0, 0.0, 9.0, 10.0)];
    let cm = match_detections(&preds, &gts, 0.5);
    let best = max_matching(&preds, &gts, 0.5);
    assert_eq!(cm.tp as usize, best);
    assert_eq!((cm.tp, cm.fp, cm.fn_), (2, 1, 0));
}

fn random_meta(rng: &mut ChaCha8Rng) -> ScanMeta {
    ScanMeta {
        age_group: AgeGroup::ALL[rng.gen_range(0..4)],
        gender: Gender::ALL[rng.gen_range(0..2)],
        manufacturer: Manufacturer::ALL[rng.gen_range(0..4)],
        view: View::Ap,
    }
}

fn random_records(rng: &mut ChaCha8Rng, n: usize) -> Vec<EvalRecord> {
    (0..n)
        .map(|i| {
            let mut contributions = BTreeMap::new();
            for p in [PathologyId::JointSpace, PathologyId::Grading, PathologyId::Osteophytes] {
                contributions.insert(p, ConfusionMatrix::default().accumulate(rng.gen_bool(0.5), rng.gen_bool(0.4)));
            }
            EvalRecord { scan_id: Some(format!("S{i}")), meta: random_meta(rng).into(), contributions }
        })
        .collect()
}

#[test]
fn subgroup_partition_sums_to_global() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let recs = random_records(&mut rng, 1000);
    let global: ConfusionMatrix = recs.iter().flat_map(|r| r.contributions.values().copied()).sum();
    for key in [StratumKey::AgeGroup, StratumKey::Gender, StratumKey::Manufacturer] {
        let rep = subgroup_report(&recs, key, None).unwrap();
        assert_eq!(rep.rows.len(), stratum_labels(key).len());
        assert_eq!(rep.rows.iter().map(|r| r.cm).sum::<ConfusionMatrix>(), global);
    }
}

#[test]
fn concatenated_record_sets_add_per_group() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random_records(&mut rng, 300);
    let b = random_records(&mut rng, 200);
    let both: Vec<EvalRecord> = a.iter().chain(&b).cloned().collect();
    let ra = subgroup_report(&a, StratumKey::Manufacturer, Some(PathologyId::Grading)).unwrap();
    let rb = subgroup_report(&b, StratumKey::Manufacturer, Some(PathologyId::Grading)).unwrap();
    let rab = subgroup_report(&both, StratumKey::Manufacturer, Some(PathologyId::Grading)).unwrap();
    for ((x, y), z) in ra.rows.iter().zip(&rb.rows).zip(&rab.rows) {
        assert_eq!(x.cm + y.cm, z.cm);
    }
}

#[test]
fn single_group_equals_global() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut recs = random_records(&mut rng, 100);
    for r in &mut recs {
        r.meta.gender = Some(Gender::Female);
    }
    let rep = subgroup_report(&recs, StratumKey::Gender, None).unwrap();
    let global: ConfusionMatrix = recs.iter().flat_map(|r| r.contributions.values().copied()).sum();
    assert_eq!(rep.rows[1], MetricRow::new("Female", global));
    assert_eq!(rep.rows[0].cm.total(), 0);
    assert!(rep.rows[0].get(Metric::Precision).is_none());
}

#[test]
fn missing_stratum_field_is_usage_error() {
    let r = EvalRecord { contributions: BTreeMap::from([(PathologyId::Grading, ConfusionMatrix::new(1, 0, 0, 0))]), ..Default::default() };
    assert!(subgroup_report(&[r], StratumKey::AgeGroup, None).is_err());
}

#[test]
fn eval_records_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for r in random_records(&mut rng, 20) {
        let back: EvalRecord = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}

fn any_box() -> impl Strategy<Value = BoundingBox> {
    (0.0f64..100.0, 0.0f64..100.0, 0.1f64..50.0, 0.1f64..50.0).prop_map(|(x, y, w, h)| BoundingBox::new(x, y, x + w, y + h))
}

fn any_cm() -> impl Strategy<Value = ConfusionMatrix> {
    (0u64..50, 0u64..50, 0u64..50, 0u64..50).prop_map(|(a, b, c, d)| ConfusionMatrix::new(a, b, c, d))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn iou_symmetric_and_bounded(a in any_box(), b in any_box()) {
        let v = iou(&a, &b);
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metric_identities(cm in any_cm()) {
        prop_assert_eq!(sensitivity(&cm), recall(&cm));
        if let (Ok(p), Ok(r)) = (precision(&cm), recall(&cm)) {
            if p + r > 0.0 {
                prop_assert!((f1(&cm).unwrap() - 2.0 * p * r / (p + r)).abs() < 1e-12);
            }
        }
        let swapped = ConfusionMatrix::new(cm.tn, cm.fn_, cm.tp, cm.fp);
        prop_assert_eq!(accuracy(&cm), accuracy(&swapped));
    }

    #[test]
    fn merged_metrics_use_summed_counts(a in any_cm(), b in any_cm()) {
        let m = a + b;
        let summed = ConfusionMatrix::new(a.tp + b.tp, a.fp + b.fp, a.tn + b.tn, a.fn_ + b.fn_);
        for metric in Metric::ALL {
            prop_assert_eq!(metric.value(&m), metric.value(&summed));
        }
    }

    #[test]
    fn fixed_pct_matches_float_rounding_away_from_ties(num in 0u64..100_000, extra in 1u64..100_000) {
        let den = num + extra;
        let exact = 10_000.0 * num as f64 / den as f64;
        let got = FixedPct::from_ratio(num, den).0 as f64;
        if (exact - exact.floor() - 0.5).abs() > 1e-6 {
            prop_assert_eq!(got, exact.round());
        }
    }
}
