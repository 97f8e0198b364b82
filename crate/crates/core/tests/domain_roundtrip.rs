use std::collections::BTreeMap;

use kneexr_core::domain::*;
use kneexr_core::phantom::{sample_phantom, SpecDistribution};
use proptest::prelude::*;

fn rt<T: serde::Serialize + serde::de::DeserializeOwned>(v: &T) -> T {
    serde_json::from_str(&serde_json::to_string(v).unwrap()).unwrap()
}

#[test]
fn phantom_annotations_round_trip() {
    let dist = SpecDistribution { image_size: 96, implant_prob: 0.5, soft_tissue_prob: 0.8, ..Default::default() };
    for i in 0..12 {
        let (scan, ann, _) = sample_phantom(&dist, 4, i).unwrap();
        assert_eq!(rt(&ann), ann);
        assert_eq!(rt(&scan.meta), scan.meta);
    }
}

fn report(probs: [f64; 4], conf: f64, angle: f64) -> FindingReport {
    let mut findings = BTreeMap::new();
    findings.insert(PathologyId::Osteophytes, vec![Finding { region: Region::Box(BoundingBox::new(1.0, 2.0, 3.5, 4.0)), confidence: conf }]);
    findings.insert(PathologyId::Postop, vec![Finding { region: Region::Mask(Mask::from_fn(3, 5, |x, y| x == y)), confidence: conf }]);
    let total: f64 = probs.iter().sum();
    let probs = probs.map(|p| p / total);
    FindingReport {
        scan_id: "R1".into(),
        gate: GateResult {
            is_xray: Some(StageOutcome { decision: Decision::Accept, confidence: conf }),
            is_knee: Some(StageOutcome { decision: Decision::Accept, confidence: conf }),
            view: Some(ViewOutcome { view: View::Ap, confidence: conf }),
            rotation_applied: Some(angle),
            rejected_at: None,
        },
        findings,
        joint_space_pred: Some(JointSpaceWidths { medial: 10.5, lateral: 12.25 }),
        alignment_pred: Some(AlignmentPrediction { angle, misaligned_prob: conf }),
        grade_probs: Some(probs),
        grade: Some(argmax_low(&probs) as u8),
        grade_members: vec![probs, probs],
    }
}

proptest! {
    #[test]
    fn finding_reports_round_trip(p in prop::array::uniform4(0.01f64..1.0), conf in 0.0f64..=1.0, angle in -45.0f64..45.0) {
        let r = report(p, conf, angle);
        prop_assert!(validate_report(&r).is_empty());
        prop_assert_eq!(rt(&r), r);
    }

    #[test]
    fn boxes_and_keypoints_round_trip(x in 0.0f64..500.0, y in 0.0f64..500.0, w in 0.5f64..50.0) {
        let b = BoundingBox::new(x, y, x + w, y + w);
        prop_assert_eq!(rt(&b), b);
        let k = KeypointSet::from_array([(x, y), (x + w, y), (x, y + w), (x + w, y + w)]);
        prop_assert_eq!(rt(&k), k);
    }
}

#[test]
fn rejected_gate_serializes_stage_name() {
    let r = FindingReport::rejected("N".into(), GateResult { rejected_at: Some(GateStage::Modality), ..Default::default() });
    let v = serde_json::to_value(&r).unwrap();
    assert_eq!(v["gate"]["rejected_at"], "modality");
    assert!(v["gate"].get("view").is_none());
    assert!(validate_report(&r).is_empty());
}
