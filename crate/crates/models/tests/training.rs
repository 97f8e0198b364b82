use kneexr_core::ingest::write_annotations;
use kneexr_core::phantom::{generate_batch, generate_dataset, generate_distractor, DistractorKind, SpecDistribution};
use kneexr_core::{CoreError, GateStage};
use kneexr_models::detect::{prepare_all, train, Model, Output, TrainOptions};
use kneexr_models::ensemble::train_member;
use kneexr_models::gate::{gate_config, GateThresholds, Gatekeeper, GATE_COMPONENTS};
use kneexr_models::{builtin_config, grading_config, Ensemble, EnsembleSpec, MemberSpec, DETECTOR_IDS};

fn phantoms(n: usize) -> Vec<(kneexr_core::Scan, kneexr_core::AnnotationSet)> {
    let dist = SpecDistribution { spike_prob: 0.8, implant_prob: 0.5, soft_tissue_prob: 0.6, ..Default::default() };
    generate_batch(n, &dist, 21).unwrap()
}

#[test]
fn one_epoch_smoke_for_every_recipe() {
    let data = phantoms(8);
    let mut cfgs: Vec<_> = DETECTOR_IDS.iter().map(|id| builtin_config(id).unwrap()).collect();
    cfgs.push(grading_config(4));
    for cfg in cfgs {
        let s = prepare_all(&cfg, &data).unwrap();
        let out = train(&cfg, &s[..6], &s[6..], &TrainOptions::new(1, 5)).unwrap();
        assert_eq!(out.history.len(), 1, "{}", cfg.pathology);
        assert!(out.history[0].train_loss.is_finite(), "{}: {:?}", cfg.pathology, out.history);
    }
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let data = phantoms(10);
    let cfg = builtin_config("joint_space").unwrap();
    let s = prepare_all(&cfg, &data).unwrap();
    let bytes = |seed| train(&cfg, &s[..8], &s[8..], &TrainOptions::new(2, seed)).unwrap().model.to_checkpoint(serde_json::json!({})).to_bytes();
    let (a, b) = (bytes(3), bytes(3));
    assert_eq!(a, b);
    assert_ne!(a, bytes(4));
}

#[test]
fn saved_model_predicts_identically() {
    let data = phantoms(2);
    let cfg = builtin_config("osteophytes").unwrap();
    let m = Model::new(cfg, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("o.ckpt");
    m.save(&path, serde_json::json!({"note": "x"})).unwrap();
    let back = Model::load(&path, Some("osteophytes")).unwrap();
    assert_eq!(back.predict(&data[0].0.image).unwrap(), m.predict(&data[0].0.image).unwrap());
    assert!(matches!(Model::load(&path, Some("sclerosis")), Err(CoreError::Integrity(_))));
}

#[test]
fn grading_without_grades_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(4, &SpecDistribution::default(), 2, dir.path()).unwrap();
    for e in &m.entries {
        let mut a = m.load_annotations(e).unwrap().unwrap();
        a.oa_grade = None;
        write_annotations(&dir.path().join(e.annotations_path.as_ref().unwrap()), &a).unwrap();
    }
    let member = MemberSpec { name: "d121".into(), width: 4 };
    let err = train_member(&member, &m, &m, &TrainOptions::new(1, 0)).unwrap_err();
    assert!(matches!(err, CoreError::Usage(_)), "{err:?}");
}

#[test]
fn ensemble_load_reports_missing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let err = Ensemble::load(EnsembleSpec::default(), dir.path()).unwrap_err();
    assert!(matches!(err, CoreError::Integrity(_)), "{err:?}");
}

fn untrained_gate(thresholds: GateThresholds) -> Gatekeeper {
    let models = GATE_COMPONENTS.map(|c| Model::new(gate_config(c).unwrap(), 7).unwrap());
    Gatekeeper::new(models, thresholds).unwrap()
}

#[test]
fn gate_short_circuits_at_first_rejection() {
    let img = generate_distractor(DistractorKind::UniformNoise, 256, 1);
    let g = untrained_gate(GateThresholds { modality: 1.1, ..Default::default() });
    let (r, corrected) = g.run_gate(&img).unwrap();
    assert_eq!(r.rejected_at, Some(GateStage::Modality));
    assert!(r.is_knee.is_none() && r.view.is_none() && corrected.is_none());
    assert_eq!(g.call_counts(), [1, 0, 0, 0]);

    let g = untrained_gate(GateThresholds { modality: 0.0, anatomy: 1.1, view: 0.5 });
    assert_eq!(g.run_gate(&img).unwrap().0.rejected_at, Some(GateStage::Anatomy));
    assert_eq!(g.call_counts(), [1, 1, 0, 0]);

    // view threshold above 1 means no image is ever called AP
    let g = untrained_gate(GateThresholds { modality: 0.0, anatomy: 0.0, view: 1.1 });
    let (r, _) = g.run_gate(&img).unwrap();
    assert_eq!(r.rejected_at, Some(GateStage::View));
    assert_eq!(g.call_counts(), [1, 1, 1, 0]);
    let json = serde_json::to_value(r).unwrap();
    assert_eq!(json["rejected_at"], "view");
}

#[test]
fn accepted_gate_reports_rotation_or_rotation_rejection() {
    let data = phantoms(1);
    let g = untrained_gate(GateThresholds { modality: 0.0, anatomy: 0.0, view: 0.0 });
    let (r, corrected) = g.run_gate(&data[0].0.image).unwrap();
    assert_eq!(g.call_counts(), [1, 1, 1, 1]);
    match r.rejected_at {
        None => assert!(r.rotation_applied.is_some() && corrected.is_some()),
        Some(stage) => assert_eq!(stage, GateStage::Rotation),
    }
    assert!(r.validate().is_empty(), "{:?}", r.validate());
}

#[test]
fn classifier_output_is_a_distribution() {
    let data = phantoms(1);
    let m = Model::new(grading_config(6), 2).unwrap();
    match m.predict(&data[0].0.image).unwrap() {
        Output::Classes(p) => {
            assert_eq!(p.len(), 4);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9 && p.iter().all(|&x| x >= 0.0));
        }
        other => panic!("unexpected {other:?}"),
    }
}
