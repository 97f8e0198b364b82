use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use kneexr_cli::evaluate::active_pathologies;
use kneexr_cli::*;
use kneexr_core::ingest::parse_manifest;
use kneexr_core::{Finding, FindingReport, GateResult, GateStage, PathologyId, Region};

fn ctx_in(dir: &Path, toml: &str) -> Context {
    let mut c = Context::new(PipelineConfig::parse(toml, "test").unwrap(), dir);
    c.deterministic = true;
    c
}

const SMALL: &str = "epochs = 1\n[split]\ntrial_fraction = 0.3\n[predict]\npathologies = [\"joint_space\", \"tibial_spike\"]\n";

struct Workspace {
    _tmp: tempfile::TempDir,
    ctx: Context,
}

/// One trained workspace shared by the tests below.
fn workspace() -> &'static Workspace {
    static W: OnceLock<Workspace> = OnceLock::new();
    W.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let ctx = ctx_in(tmp.path(), SMALL);
        let m = cmd_gen_phantoms(&ctx, 60, 10, None).unwrap();
        cmd_ingest(&ctx, &m).unwrap();
        cmd_split(&ctx, None).unwrap();
        cmd_train(&ctx, "joint_space", Some(3)).unwrap();
        cmd_train(&ctx, "tibial_spike", None).unwrap();
        cmd_train(&ctx, "grading", None).unwrap();
        cmd_train(&ctx, "gate", Some(6)).unwrap();
        cmd_predict(&ctx, None).unwrap();
        cmd_evaluate(&ctx, &EvaluateArgs::default()).unwrap();
        cmd_report(&ctx).unwrap();
        Workspace { _tmp: tmp, ctx }
    })
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn gen_phantoms_writes_and_repeats() {
    let tmp = tempfile::tempdir().unwrap();
    let a = ctx_in(&tmp.path().join("a"), "");
    let b = ctx_in(&tmp.path().join("b"), "");
    let ma = cmd_gen_phantoms(&a, 10, 0, None).unwrap();
    let mb = cmd_gen_phantoms(&b, 10, 0, None).unwrap();
    let images = std::fs::read_dir(ma.parent().unwrap().join("images")).unwrap().count();
    assert_eq!(images, 10);
    let ra = RunManifest::load(&ma.parent().unwrap().join("run_manifest.json")).unwrap();
    let rb = RunManifest::load(&mb.parent().unwrap().join("run_manifest.json")).unwrap();
    assert_eq!(ra.artifacts.len(), 21);
    let hashes = |r: &RunManifest| r.artifacts.iter().map(|x| x.sha256.clone()).collect::<Vec<_>>();
    assert_eq!(hashes(&ra), hashes(&rb));
    assert_eq!(read(&ma), read(&mb));
    assert!(matches!(cmd_gen_phantoms(&a, 0, 0, None), Err(CliError::Usage(_))));
}

#[test]
fn ingest_rejects_bad_entries_and_keeps_the_rest() {
    let tmp = tempfile::tempdir().unwrap();
    let ctx = ctx_in(tmp.path(), "");
    let m = cmd_gen_phantoms(&ctx, 4, 0, None).unwrap();
    let mut text = read(&m);
    text.push_str(r#"{"scan_id":"ghost","image_path":"images/none.png","meta":{"age_group":"18-40","gender":"Male","manufacturer":"Siemens","view":"AP"},"labeled":false}"#);
    std::fs::write(&m, text).unwrap();
    let s = cmd_ingest(&ctx, &m).unwrap();
    assert_eq!((s.accepted, s.rejected.len()), (4, 1));
    assert_eq!(s.rejected[0].scan_id, "ghost");
    let ing = parse_manifest(&ctx.ingested_manifest()).unwrap();
    assert!(ing.entries.iter().all(|e| e.image_path.is_absolute()));
}

#[test]
fn train_needs_a_split_and_a_known_component() {
    let tmp = tempfile::tempdir().unwrap();
    let ctx = ctx_in(tmp.path(), "");
    match cmd_train(&ctx, "joint_space", Some(1)) {
        Err(CliError::Usage(m)) => assert!(m.contains("kneexr split"), "{m}"),
        other => panic!("{other:?}"),
    }
    match cmd_train(&ctx, "knee", Some(1)) {
        Err(CliError::Usage(m)) => assert!(m.contains("joint_space") && m.contains("grading") && m.contains("gate"), "{m}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn best_validation_curve_never_rises() {
    let w = workspace();
    let hist = read(&w.ctx.checkpoints().join("joint_space.history.jsonl"));
    let best: Vec<f64> = hist.lines().map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["best_val"].as_f64().unwrap()).collect();
    assert_eq!(best.len(), 3);
    assert!(best.windows(2).all(|p| p[1] <= p[0]), "{best:?}");
}

#[test]
fn retraining_with_same_seed_repeats_history_and_checkpoint() {
    let w = workspace();
    let tmp = tempfile::tempdir().unwrap();
    let mut c = w.ctx.clone();
    c.config.paths.checkpoints = tmp.path().to_path_buf();
    cmd_train(&c, "joint_space", Some(3)).unwrap();
    for f in ["joint_space.history.jsonl", "joint_space.ckpt"] {
        assert_eq!(std::fs::read(tmp.path().join(f)).unwrap(), std::fs::read(w.ctx.checkpoints().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn tampered_split_is_detected() {
    let w = workspace();
    let tmp = tempfile::tempdir().unwrap();
    let mut c = w.ctx.clone();
    c.config.paths.data_root = tmp.path().to_path_buf();
    let split = w.ctx.split_dir();
    let dst = c.split_dir();
    std::fs::create_dir_all(&dst).unwrap();
    for f in ["train.jsonl", "trial.jsonl"] {
        std::fs::copy(split.join(f), dst.join(f)).unwrap();
    }
    let mut rm = RunManifest::load(&split.join("run_manifest.json")).unwrap();
    for a in &mut rm.artifacts {
        a.path = dst.join(a.path.file_name().unwrap());
    }
    rm.save(&dst.join("run_manifest.json")).unwrap();
    assert!(load_split(&c).is_ok());
    let mut text = read(&dst.join("train.jsonl"));
    text.push('\n');
    std::fs::write(dst.join("train.jsonl"), text).unwrap();
    assert!(matches!(load_split(&c), Err(CliError::Integrity(_))));
}

fn reports(ctx: &Context) -> Vec<FindingReport> {
    read_reports(&ctx.run_dir().join(PREDICTIONS_FILE)).unwrap()
}

#[test]
fn every_scan_gets_one_report_in_manifest_order() {
    let w = workspace();
    let trial = parse_manifest(&w.ctx.split_dir().join("trial.jsonl")).unwrap();
    let ids: Vec<String> = reports(&w.ctx).into_iter().map(|r| r.scan_id).collect();
    assert_eq!(ids, trial.entries.iter().map(|e| e.scan_id.clone()).collect::<Vec<_>>());
}

#[test]
fn accepted_reports_carry_a_grade_distribution() {
    let w = workspace();
    let rs = reports(&w.ctx);
    let accepted: Vec<_> = rs.iter().filter(|r| r.gate.accepted()).collect();
    assert!(!accepted.is_empty());
    for r in accepted {
        let p = r.grade_probs.unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(r.grade_members.len(), 3);
    }
    for r in rs.iter().filter(|r| !r.gate.accepted()) {
        assert!(r.findings.is_empty() && r.grade.is_none());
    }
}

#[test]
fn noise_images_stop_at_modality() {
    let w = workspace();
    let tmp = tempfile::tempdir().unwrap();
    let all = parse_manifest(&w.ctx.ingested_manifest()).unwrap();
    // D00001, D00006 are uniform noise.
    let noise: Vec<_> = all.entries.iter().filter(|e| e.scan_id == "D00001" || e.scan_id == "D00006").cloned().collect();
    let p = tmp.path().join("noise.jsonl");
    all.with_entries(noise).write(&p).unwrap();
    let mut c = w.ctx.clone();
    c.run_id = "noise".into();
    c.config.paths.reports = tmp.path().to_path_buf();
    cmd_predict(&c, Some(&p)).unwrap();
    let rs = reports(&c);
    assert_eq!(rs.len(), 2);
    for r in rs {
        assert_eq!(r.gate.rejected_at, Some(GateStage::Modality), "{}", r.scan_id);
    }
}

#[test]
fn parallel_prediction_matches_serial() {
    let w = workspace();
    let tmp = tempfile::tempdir().unwrap();
    let mut c = w.ctx.clone();
    c.deterministic = false;
    c.workers = 3;
    c.config.paths.reports = tmp.path().to_path_buf();
    cmd_predict(&c, None).unwrap();
    assert_eq!(read(&c.run_dir().join(PREDICTIONS_FILE)), read(&w.ctx.run_dir().join(PREDICTIONS_FILE)));
}

#[test]
fn missing_checkpoint_fails_before_any_scan() {
    let w = workspace();
    let tmp = tempfile::tempdir().unwrap();
    let mut c = w.ctx.clone();
    c.config.paths.reports = tmp.path().join("r");
    c.config.predict.pathologies.push("sclerosis".into());
    match cmd_predict(&c, None) {
        Err(CliError::Integrity(m)) => assert!(m.contains("sclerosis.ckpt"), "{m}"),
        other => panic!("{other:?}"),
    }
    assert!(!c.run_dir().exists());
}

/// Reports that restate the ground truth exactly.
fn oracle_reports(ctx: &Context) -> Vec<FindingReport> {
    let m = parse_manifest(&ctx.split_dir().join("trial.jsonl")).unwrap();
    let gate = GateResult { rotation_applied: Some(0.0), ..Default::default() };
    let mut out = Vec::new();
    for e in &m.entries {
        let mut r = FindingReport::rejected(e.scan_id.clone(), gate.clone());
        if let Some(a) = m.load_annotations(e).unwrap() {
            let boxes = |v: &[kneexr_core::BoundingBox]| v.iter().map(|b| Finding { region: Region::Box(*b), confidence: 0.9 }).collect::<Vec<_>>();
            let masks = |v: &[kneexr_core::Mask]| v.iter().map(|b| Finding { region: Region::Mask(b.clone()), confidence: 0.9 }).collect::<Vec<_>>();
            r.findings.insert(PathologyId::Sclerosis, boxes(&a.sclerosis_boxes));
            r.findings.insert(PathologyId::Osteophytes, boxes(&a.osteophyte_boxes));
            r.findings.insert(PathologyId::TibialSpike, boxes(&a.tibial_spike_boxes));
            r.findings.insert(PathologyId::Postop, masks(&a.implant_masks));
            r.findings.insert(PathologyId::SoftTissue, masks(&a.soft_tissue_masks));
            r.joint_space_pred = a.joint_space_widths;
            r.alignment_pred = a.alignment.as_ref().map(|x| kneexr_core::AlignmentPrediction { angle: x.varus_valgus_angle, misaligned_prob: if x.misaligned { 1.0 } else { 0.0 } });
            let g = a.oa_grade.unwrap();
            let mut p = [0.0; 4];
            p[g as usize] = 1.0;
            r.grade_probs = Some(p);
            r.grade = Some(g);
        }
        out.push(r);
    }
    out
}

fn write_reports(path: &Path, rs: &[FindingReport]) {
    std::fs::write(path, rs.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect::<String>()).unwrap();
}

fn evaluate_into(ctx: &Context, reports: &Path, out: &Path) -> BTreeMap<String, String> {
    let args = EvaluateArgs { reports: Some(reports), out: Some(out), ..Default::default() };
    cmd_evaluate(ctx, &args).unwrap();
    std::fs::read_dir(out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv" || x == "txt" || x == "jsonl"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), read(&p)))
        .collect()
}

#[test]
fn perfect_predictions_score_one_hundred() {
    let w = workspace();
    let tmp = tempfile::tempdir().unwrap();
    let rp = tmp.path().join("oracle.jsonl");
    let rs = oracle_reports(&w.ctx);
    assert_eq!(active_pathologies(&rs).len(), 8);
    write_reports(&rp, &rs);
    let files = evaluate_into(&w.ctx, &rp, &tmp.path().join("out"));
    let csv = &files["table4_pathologies.csv"];
    let mut defined = 0;
    for line in csv.lines().skip(1) {
        for cell in line.split(',').skip(1) {
            assert!(cell == "100.00" || cell == "n/a", "{line}");
            defined += (cell == "100.00") as usize;
        }
    }
    assert!(defined >= 16, "{csv}");
    for line in files["detection_iou.csv"].lines().skip(1) {
        assert!(line.ends_with("100.00,100.00,100.00") || line.contains("n/a"), "{line}");
    }
}

#[test]
fn evaluation_ignores_report_order() {
    let w = workspace();
    let tmp = tempfile::tempdir().unwrap();
    let mut rs = reports(&w.ctx);
    let a = tmp.path().join("a.jsonl");
    write_reports(&a, &rs);
    rs.reverse();
    rs.rotate_left(3);
    let b = tmp.path().join("b.jsonl");
    write_reports(&b, &rs);
    assert_eq!(evaluate_into(&w.ctx, &a, &tmp.path().join("oa")), evaluate_into(&w.ctx, &b, &tmp.path().join("ob")));
}

#[test]
fn unknown_report_ids_are_listed() {
    let w = workspace();
    let tmp = tempfile::tempdir().unwrap();
    let mut rs = reports(&w.ctx);
    rs[0].scan_id = "X-1".into();
    rs[1].scan_id = "X-2".into();
    let p = tmp.path().join("bad.jsonl");
    write_reports(&p, &rs);
    let args = EvaluateArgs { reports: Some(&p), out: Some(tmp.path()), ..Default::default() };
    match cmd_evaluate(&w.ctx, &args) {
        Err(CliError::Integrity(m)) => assert!(m.contains("X-1") && m.contains("X-2"), "{m}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn summary_restates_every_table() {
    let w = workspace();
    let dir = w.ctx.run_dir();
    let summary = read(&dir.join(SUMMARY_FILE));
    for name in ["table4_pathologies", "table5_age_group", "table6_gender", "table7_manufacturer", "metrics_all", "detection_iou"] {
        assert!(summary.contains(&format!("`{name}.csv`")), "{name}");
        let mut r = csv::Reader::from_path(dir.join(format!("{name}.csv"))).unwrap();
        let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
        for row in r.records() {
            let row = row.unwrap();
            let cells: Vec<String> = header.iter().zip(row.iter()).skip(1).map(|(h, v)| format!("{h} {v}")).collect();
            let line = format!("- {}: {}", &row[0], cells.join(", "));
            assert!(summary.contains(&line), "{line}");
        }
    }
    for svg in ["table4_pathologies.svg", "table5_age_group.svg", "table6_gender.svg", "table7_manufacturer.svg"] {
        assert!(read(&dir.join(svg)).starts_with("<svg"));
    }
}

#[test]
fn repeated_report_differs_only_in_timestamps() {
    let w = workspace();
    let first = read(&w.ctx.run_dir().join(SUMMARY_FILE));
    let mut c = w.ctx.clone();
    c.deterministic = false;
    cmd_report(&c).unwrap();
    let second = read(&c.run_dir().join(SUMMARY_FILE));
    let strip = |s: &str| s.lines().filter(|l| !l.starts_with("generated:")).collect::<Vec<_>>().join("\n");
    assert_eq!(strip(&first), strip(&second));
    cmd_report(&w.ctx).unwrap();
}

#[test]
fn unknown_run_id_is_a_usage_error() {
    let w = workspace();
    let mut c = w.ctx.clone();
    c.run_id = "never-ran".into();
    assert!(matches!(cmd_report(&c), Err(CliError::Usage(_))));
}

fn kneexr(dir: &Path, args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_kneexr")).args(args).current_dir(dir).env("RUST_LOG", "error").output().unwrap().status.code().unwrap()
}

#[test]
fn binary_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(kneexr(d, &["evaluate", "--fixture"]), 0);
    assert_eq!(kneexr(d, &["train", "knee"]), 2);
    assert_eq!(kneexr(d, &["gen-phantoms", "--n", "0"]), 2);
    assert_eq!(kneexr(d, &["frobnicate"]), 2);
    assert_eq!(kneexr(d, &["ingest", "--manifest", "missing.jsonl"]), 4);
    std::fs::write(d.join("bad.jsonl"), "{not json\n").unwrap();
    assert_eq!(kneexr(d, &["ingest", "--manifest", "bad.jsonl"]), 3);
    std::fs::write(d.join("c.toml"), "epochs = 0\n").unwrap();
    assert_eq!(kneexr(d, &["--config", "c.toml", "report"]), 2);
    let pred: PathBuf = d.join("trial.jsonl");
    std::fs::write(&pred, "").unwrap();
    assert_eq!(kneexr(d, &["predict", "--manifest", "trial.jsonl"]), 3);
}
