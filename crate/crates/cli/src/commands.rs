use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use kneexr_core::image::{resize, rotate, rotate_point, save_image};
use kneexr_core::ingest::{parse_manifest, select_for_pathology, stratified_split, DatasetManifest, ManifestEntry};
use kneexr_core::metrics::ClinicalFixture;
use kneexr_core::phantom::{derive_seed, generate_dataset, generate_distractor, DistractorKind};
use kneexr_core::{validate_report, validate_scan, BoundingBox, FindingReport, Image, JointSpaceWidths, Mask, PathologyId, Region, View};
use kneexr_models::config::DETECTOR_IDS;
use kneexr_models::data::load_labeled;
use kneexr_models::detect::{history_jsonl, prepare_all, train, TrainOptions, TrainOutcome};
use kneexr_models::ensemble::train_member;
use kneexr_models::gate::{train_gate, GATE_COMPONENTS};
use kneexr_models::{Ensemble, Gatekeeper, Model, Output};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::evaluate::{fixture_tables, pipeline_tables, records_jsonl, score, write_tables, PATHOLOGY_FILE, SUBGROUP_FILES};
use crate::plot::bar_chart;
use crate::run::{write_file, Context, RunManifest};

pub const GRADING: &str = "grading";
pub const GATE: &str = "gate";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const SUMMARY_FILE: &str = "summary.md";

/// Names accepted by `train`.
pub fn trainable_components() -> Vec<&'static str> {
    DETECTOR_IDS.iter().copied().chain([GRADING, GATE]).collect()
}

/// Fixed per-component stream so components train independently of the
/// order they are invoked in.
fn component_seed(seed: u64, name: &str) -> u64 {
    let names: Vec<&str> = DETECTOR_IDS.iter().copied().chain([GRADING]).chain(GATE_COMPONENTS).collect();
    let idx = names.iter().position(|n| *n == name).expect("known component");
    derive_seed(seed, 1000 + idx as u64)
}

const DISTRACTORS: [DistractorKind; 5] = [DistractorKind::UniformNoise, DistractorKind::Chest, DistractorKind::SingleBone, DistractorKind::Texture, DistractorKind::Lateral];

/// Writes `n` phantoms plus `distractors` unlabeled non-knee (or lateral)
/// images under `out` (default `<data_root>/phantoms`).
pub fn cmd_gen_phantoms(ctx: &Context, n: usize, distractors: usize, out: Option<&Path>) -> Result<PathBuf> {
    if n == 0 {
        return Err(CliError::Usage("gen-phantoms needs --n >= 1".into()));
    }
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| ctx.data_root().join("phantoms"));
    let seed = ctx.config.seed;
    let dist = &ctx.config.phantoms;
    let mut manifest = generate_dataset(n, dist, seed, &out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
    for k in 0..distractors {
        let kind = DISTRACTORS[k % DISTRACTORS.len()];
        let img = generate_distractor(kind, dist.image_size, derive_seed(seed, (n + k) as u64));
        let id = format!("D{:05}", k + 1);
        let rel = PathBuf::from("images").join(format!("{id}.png"));
        save_image(&img, &out.join(&rel))?;
        let mut meta = dist.meta.sample(&mut rng)?;
        meta.view = if kind == DistractorKind::Lateral { View::Lateral } else { View::Unknown };
        manifest.entries.push(ManifestEntry { scan_id: id, image_path: rel, meta, annotations_path: None, labeled: false });
    }
    let path = out.join("manifest.jsonl");
    manifest.write(&path)?;
    let mut artifacts = vec![path.clone()];
    for e in &manifest.entries {
        artifacts.push(out.join(&e.image_path));
        artifacts.extend(e.annotations_path.as_ref().map(|a| out.join(a)));
    }
    ctx.run_manifest("gen-phantoms", None, &artifacts)?.save(&out.join("run_manifest.json"))?;
    log::info!("wrote {} phantoms and {distractors} distractors to {}", n, out.display());
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejected {
    pub scan_id: String,
    pub problems: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub accepted: usize,
    pub by_view: BTreeMap<String, usize>,
    pub rejected: Vec<Rejected>,
}

fn check_entry(m: &DatasetManifest, e: &ManifestEntry) -> Vec<String> {
    let scan = match m.load_scan(e) {
        Ok(s) => s,
        Err(err) => return vec![err.to_string()],
    };
    let mut problems: Vec<String> = validate_scan(&scan).iter().map(|v| v.to_string()).collect();
    match m.load_annotations(e) {
        Ok(Some(a)) => problems.extend(a.validate(scan.image.width(), scan.image.height()).iter().map(|v| v.to_string())),
        Ok(None) if e.labeled => problems.push("labeled entry without annotations_path".into()),
        Ok(None) => {}
        Err(err) => problems.push(err.to_string()),
    }
    problems
}

fn absolute(p: &Path) -> Result<PathBuf> {
    p.canonicalize().map_err(|e| CliError::io(p, e))
}

/// Validates every scan of an external manifest and writes the usable
/// entries, with absolute paths, to `<data_root>/ingested/manifest.jsonl`.
pub fn cmd_ingest(ctx: &Context, manifest_path: &Path) -> Result<IngestSummary> {
    let m = parse_manifest(manifest_path)?;
    let mut keep = Vec::new();
    let mut rejected = Vec::new();
    let mut by_view = BTreeMap::new();
    for e in &m.entries {
        let problems = check_entry(&m, e);
        if !problems.is_empty() {
            log::warn!("{}: {}", e.scan_id, problems.join("; "));
            rejected.push(Rejected { scan_id: e.scan_id.clone(), problems });
            continue;
        }
        let mut e = e.clone();
        e.image_path = absolute(&m.resolve(&e.image_path))?;
        if let Some(a) = &e.annotations_path {
            e.annotations_path = Some(absolute(&m.resolve(a))?);
        }
        *by_view.entry(format!("{:?}", e.meta.view)).or_insert(0) += 1;
        keep.push(e);
    }
    if keep.is_empty() {
        return Err(CliError::Integrity(format!("no usable scans in {}", manifest_path.display())));
    }
    let summary = IngestSummary { accepted: keep.len(), by_view, rejected };
    let out = ctx.ingested_manifest();
    let dir = out.parent().expect("has parent").to_path_buf();
    m.with_entries(keep).write(&out)?;
    let report = dir.join("ingest_report.json");
    write_file(&report, serde_json::to_string_pretty(&summary).expect("plain struct"))?;
    ctx.run_manifest("ingest", Some(manifest_path), &[out, report])?.save(&dir.join("run_manifest.json"))?;
    Ok(summary)
}

/// Stratified train/trial split of the ingested manifest (or `manifest`).
pub fn cmd_split(ctx: &Context, manifest: Option<&Path>) -> Result<(usize, usize)> {
    let input = manifest.map(Path::to_path_buf).unwrap_or_else(|| ctx.ingested_manifest());
    if !input.exists() {
        return Err(CliError::Usage(format!("no manifest at {}; run `kneexr ingest --manifest <file>` first", input.display())));
    }
    let m = parse_manifest(&input)?;
    let (train, trial) = stratified_split(&m, &ctx.config.split_spec())?;
    let dir = ctx.split_dir();
    let (tp, vp) = (dir.join("train.jsonl"), dir.join("trial.jsonl"));
    train.write(&tp)?;
    trial.write(&vp)?;
    ctx.run_manifest("split", Some(&input), &[tp, vp])?.save(&dir.join("run_manifest.json"))?;
    Ok((train.len(), trial.len()))
}

/// Loads the split after checking it against its run manifest.
pub fn load_split(ctx: &Context) -> Result<(DatasetManifest, DatasetManifest)> {
    let dir = ctx.split_dir();
    let rm = dir.join("run_manifest.json");
    let (tp, vp) = (dir.join("train.jsonl"), dir.join("trial.jsonl"));
    if !rm.exists() || !tp.exists() || !vp.exists() {
        return Err(CliError::Usage(format!("no split found under {}; run `kneexr split` first", dir.display())));
    }
    RunManifest::load(&rm)?.verify()?;
    Ok((parse_manifest(&tp)?, parse_manifest(&vp)?))
}

/// Labeled AP entries with ground truth for `p`. A labeled scan without
/// boxes or masks is a negative example for the box and mask targets.
fn training_subset(m: &DatasetManifest, p: PathologyId) -> Result<DatasetManifest> {
    let ap = m.with_entries(m.entries.iter().filter(|e| e.labeled && e.meta.view == View::Ap).cloned().collect());
    match p {
        PathologyId::JointSpace | PathologyId::Alignment | PathologyId::Grading => Ok(select_for_pathology(&ap, p.as_str())?),
        _ => Ok(ap),
    }
}

fn save_outcome(dir: &Path, name: &str, out: &TrainOutcome, seed: u64, ckpt: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    out.model.save(ckpt, serde_json::json!({ "best_epoch": out.best_epoch, "seed": seed }))?;
    let hist = dir.join(format!("{name}.history.jsonl"));
    write_file(&hist, history_jsonl(&out.history))?;
    Ok(vec![ckpt.to_path_buf(), hist])
}

fn nonempty(m: DatasetManifest, what: &str, side: &str) -> Result<DatasetManifest> {
    if m.is_empty() {
        return Err(CliError::Usage(format!("{side} split has no usable scans for {what}")));
    }
    Ok(m)
}

/// Trains a detector, the grading ensemble members, or the gate stages.
/// Validation runs on the trial split each epoch and the best epoch is kept.
pub fn cmd_train(ctx: &Context, component: &str, epochs: Option<u32>) -> Result<Vec<PathBuf>> {
    let valid = trainable_components();
    if !valid.contains(&component) {
        return Err(CliError::Usage(format!("unknown component {component:?}; valid: {}", valid.join(", "))));
    }
    let epochs = epochs.unwrap_or(ctx.config.epochs);
    if epochs == 0 {
        return Err(CliError::Usage("--epochs must be >= 1".into()));
    }
    let (train_m, trial_m) = load_split(ctx)?;
    let dir = ctx.checkpoints();
    let seed = ctx.config.seed;
    let mut artifacts = Vec::new();
    match component {
        GATE => {
            let knees = |m: &DatasetManifest, side| -> Result<_> {
                let m = nonempty(training_subset(m, PathologyId::Alignment)?, "the gate", side)?;
                Ok(load_labeled(&m)?)
            };
            let (tr, va) = (knees(&train_m, "train")?, knees(&trial_m, "trial")?);
            for c in GATE_COMPONENTS {
                let s = component_seed(seed, c);
                let out = train_gate(c, &tr, &va, &TrainOptions::new(epochs, s))?;
                artifacts.extend(save_outcome(&dir, c, &out, s, &dir.join(format!("{c}.ckpt")))?);
            }
        }
        GRADING => {
            let spec = &ctx.config.ensemble;
            let tr = nonempty(training_subset(&train_m, PathologyId::Grading)?, GRADING, "train")?;
            let va = nonempty(training_subset(&trial_m, PathologyId::Grading)?, GRADING, "trial")?;
            for (i, member) in spec.members.iter().enumerate() {
                let s = derive_seed(component_seed(seed, GRADING), i as u64);
                let out = train_member(member, &tr, &va, &TrainOptions::new(epochs, s))?;
                let name = format!("grading_{}", member.name);
                artifacts.extend(save_outcome(&dir, &name, &out, s, &spec.checkpoint_path(&dir, member))?);
            }
        }
        p => {
            let cfg = ctx.config.training_config(p)?;
            let id: PathologyId = p.parse().map_err(CliError::Usage)?;
            let tr = nonempty(training_subset(&train_m, id)?, p, "train")?;
            let va = nonempty(training_subset(&trial_m, id)?, p, "trial")?;
            let s = component_seed(seed, p);
            let out = train(&cfg, &prepare_all(&cfg, &load_labeled(&tr)?)?, &prepare_all(&cfg, &load_labeled(&va)?)?, &TrainOptions::new(epochs, s))?;
            artifacts.extend(save_outcome(&dir, p, &out, s, &dir.join(format!("{p}.ckpt")))?);
        }
    }
    let input = ctx.split_dir().join("train.jsonl");
    ctx.run_manifest("train", Some(&input), &artifacts)?.save(&dir.join(format!("{component}.run.json")))?;
    Ok(artifacts.into_iter().filter(|p| p.extension().is_some_and(|e| e == "ckpt")).collect())
}

/// Every checkpoint `predict` needs under the current configuration.
pub fn required_checkpoints(ctx: &Context) -> Vec<PathBuf> {
    let dir = ctx.checkpoints();
    let mut v: Vec<PathBuf> = GATE_COMPONENTS.iter().map(|c| dir.join(format!("{c}.ckpt"))).collect();
    v.extend(ctx.config.predict.pathologies.iter().map(|p| dir.join(format!("{p}.ckpt"))));
    v.extend(ctx.config.ensemble.members.iter().map(|m| ctx.config.ensemble.checkpoint_path(&dir, m)));
    v
}

/// Loaded models for the predict stage.
pub struct Pipeline {
    pub gate: Gatekeeper,
    pub detectors: Vec<(PathologyId, Model)>,
    pub ensemble: Ensemble,
    pub work_size: (usize, usize),
}

impl Pipeline {
    pub fn load(ctx: &Context) -> Result<Self> {
        let missing: Vec<String> = required_checkpoints(ctx).into_iter().filter(|p| !p.exists()).map(|p| p.display().to_string()).collect();
        if !missing.is_empty() {
            return Err(CliError::Integrity(format!("missing checkpoints (run `kneexr train <component>`): {}", missing.join(", "))));
        }
        let dir = ctx.checkpoints();
        let gate = Gatekeeper::load(&dir, ctx.config.gate)?;
        let mut detectors = Vec::new();
        for p in &ctx.config.predict.pathologies {
            let id: PathologyId = p.parse().map_err(CliError::Usage)?;
            detectors.push((id, Model::load(&dir.join(format!("{p}.ckpt")), Some(p))?));
        }
        let ensemble = Ensemble::load(ctx.config.ensemble.clone(), &dir)?;
        Ok(Pipeline { gate, detectors, ensemble, work_size: ctx.config.preprocess.target_size })
    }

    /// Gate, then every detector and the ensemble on the rotation-corrected
    /// image. Regions are reported in raw image coordinates.
    pub fn predict(&self, scan_id: &str, raw: &Image) -> Result<FindingReport> {
        let (h, w) = self.work_size;
        let work = resize(raw, h, w);
        let (gate, corrected) = self.gate.run_gate(&work)?;
        let Some(img) = corrected else { return Ok(FindingReport::rejected(scan_id.to_string(), gate)) };
        let back = ToRaw { angle: gate.rotation_applied.unwrap_or(0.0), work: (h, w), raw: (raw.height(), raw.width()) };
        let mut r = FindingReport::rejected(scan_id.to_string(), gate);
        for (id, m) in &self.detectors {
            match m.predict(&img)? {
                Output::Widths(jw) => r.joint_space_pred = Some(back.widths(jw)),
                Output::Detections(d) => {
                    r.findings.insert(*id, d.iter().map(|d| back.finding(d.to_finding())).collect());
                }
                Output::Alignment { prediction, .. } => r.alignment_pred = Some(prediction),
                Output::Classes(_) => return Err(CliError::Integrity(format!("{id} checkpoint is a classifier"))),
            }
        }
        let g = self.ensemble.predict(&img)?;
        r.grade_probs = Some(g.fused);
        r.grade = Some(g.grade);
        r.grade_members = g.members;
        let v = validate_report(&r);
        if !v.is_empty() {
            return Err(CliError::Integrity(format!("{scan_id}: malformed report: {}", v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; "))));
        }
        Ok(r)
    }
}

/// Maps the rotation-corrected working frame back to the raw image.
struct ToRaw {
    angle: f64,
    work: (usize, usize),
    raw: (usize, usize),
}

impl ToRaw {
    fn point(&self, p: (f64, f64)) -> (f64, f64) {
        let (h, w) = self.work;
        let q = rotate_point(p, self.angle, w, h);
        (q.0 * self.raw.1 as f64 / w as f64, q.1 * self.raw.0 as f64 / h as f64)
    }

    fn widths(&self, jw: JointSpaceWidths) -> JointSpaceWidths {
        let k = self.raw.0 as f64 / self.work.0 as f64;
        JointSpaceWidths { medial: jw.medial * k, lateral: jw.lateral * k }
    }

    fn finding(&self, mut f: kneexr_core::Finding) -> kneexr_core::Finding {
        f.region = match f.region {
            Region::Box(b) => {
                let c = [(b.x_min, b.y_min), (b.x_max, b.y_min), (b.x_min, b.y_max), (b.x_max, b.y_max)].map(|p| self.point(p));
                Region::Box(BoundingBox::from_points(&c).clip(self.raw.1 as f64, self.raw.0 as f64))
            }
            Region::Mask(m) => {
                let img = Image::from_fn(m.height(), m.width(), |x, y| if m.get(x, y) { 1.0 } else { 0.0 });
                let img = resize(&rotate(&img, self.angle), self.raw.0, self.raw.1);
                Region::Mask(Mask::from_fn(img.height(), img.width(), |x, y| img.get(x, y) >= 0.5))
            }
        };
        f
    }
}

fn trial_or(ctx: &Context, manifest: Option<&Path>) -> Result<PathBuf> {
    match manifest {
        Some(p) => Ok(p.to_path_buf()),
        None => {
            let p = ctx.split_dir().join("trial.jsonl");
            if !p.exists() {
                return Err(CliError::Usage(format!("no trial split at {}; run `kneexr split` first or pass --manifest", p.display())));
            }
            Ok(p)
        }
    }
}

/// One report per manifest entry, in manifest order.
pub fn cmd_predict(ctx: &Context, manifest: Option<&Path>) -> Result<PathBuf> {
    let input = trial_or(ctx, manifest)?;
    let m = parse_manifest(&input)?;
    let pipe = Pipeline::load(ctx)?;
    let run_one = |e: &ManifestEntry| -> Result<FindingReport> { pipe.predict(&e.scan_id, &m.load_scan(e)?.image) };
    let workers = ctx.effective_workers();
    let reports: Vec<FindingReport> = if workers == 1 {
        m.entries.iter().map(run_one).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(|e| CliError::Usage(format!("--workers {workers}: {e}")))?;
        pool.install(|| m.entries.par_iter().map(run_one).collect::<Result<_>>())?
    };
    let out = ctx.run_dir().join(PREDICTIONS_FILE);
    let body: String = reports.iter().map(|r| serde_json::to_string(r).expect("plain record") + "\n").collect();
    write_file(&out, body)?;
    ctx.run_manifest("predict", Some(&input), std::slice::from_ref(&out))?.save(&ctx.run_dir().join("predict.run.json"))?;
    let rejected = reports.iter().filter(|r| !r.gate.accepted()).count();
    log::info!("{} reports ({} rejected by the gate) -> {}", reports.len(), rejected, out.display());
    Ok(out)
}

pub fn read_reports(path: &Path) -> Result<Vec<FindingReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::Integrity(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct EvaluateArgs<'a> {
    pub reports: Option<&'a Path>,
    pub manifest: Option<&'a Path>,
    pub fixture: bool,
    pub out: Option<&'a Path>,
}

/// Writes the per-pathology and subgroup tables for a set of reports, or
/// for the bundled clinical fixture.
pub fn cmd_evaluate(ctx: &Context, args: &EvaluateArgs) -> Result<Vec<PathBuf>> {
    let out = args.out.map(Path::to_path_buf).unwrap_or_else(|| ctx.run_dir());
    let (mut written, input) = if args.fixture {
        (write_tables(&out, &fixture_tables(&ClinicalFixture::bundled())?)?, None)
    } else {
        let rp = args.reports.map(Path::to_path_buf).unwrap_or_else(|| ctx.run_dir().join(PREDICTIONS_FILE));
        if !rp.exists() {
            return Err(CliError::Usage(format!("no reports at {}; run `kneexr predict` first", rp.display())));
        }
        let mp = trial_or(ctx, args.manifest)?;
        let scored = score(&read_reports(&rp)?, &parse_manifest(&mp)?, &ctx.config.evaluation)?;
        let mut w = write_tables(&out, &pipeline_tables(&scored, ctx.config.evaluation.iou)?)?;
        let recs = out.join("eval_records.jsonl");
        write_file(&recs, records_jsonl(&scored.records))?;
        w.push(recs);
        (w, Some(mp))
    };
    let rm = ctx.run_manifest("evaluate", input.as_deref(), &written)?;
    let rp = out.join("evaluate.run.json");
    rm.save(&rp)?;
    written.push(rp);
    Ok(written)
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e))?;
    let header = r.headers().map_err(|e| CliError::Integrity(format!("{}: {e}", path.display())))?.iter().map(String::from).collect();
    let rows = r.records().map(|x| x.map(|x| x.iter().map(String::from).collect()).map_err(|e| CliError::Integrity(format!("{}: {e}", path.display())))).collect::<Result<_>>()?;
    Ok((header, rows))
}

fn chart(title: &str, header: &[String], rows: &[Vec<String>]) -> String {
    let cats: Vec<String> = rows.iter().map(|r| r[0].clone()).collect();
    let series: Vec<(String, Vec<Option<f64>>)> = (1..header.len()).map(|c| (header[c].clone(), rows.iter().map(|r| r[c].parse().ok()).collect())).collect();
    let lowest = series.iter().flat_map(|s| s.1.iter().flatten()).fold(100.0f64, |a, &b| a.min(b));
    let floor = ((lowest - 5.0) / 10.0).floor().clamp(0.0, 9.0) * 10.0;
    bar_chart(title, &cats, &series, floor)
}

/// Summary document plus SVG charts for an evaluated run.
pub fn cmd_report(ctx: &Context) -> Result<PathBuf> {
    let dir = ctx.run_dir();
    let main_csv = dir.join(format!("{PATHOLOGY_FILE}.csv"));
    if !main_csv.exists() {
        return Err(CliError::Usage(format!("unknown run id {:?}: no evaluation tables under {}; run `kneexr evaluate` first", ctx.run_id, dir.display())));
    }
    let eval = RunManifest::load(&dir.join("evaluate.run.json")).ok();
    let stamp = if ctx.deterministic { "1970-01-01T00:00:00Z".to_string() } else { chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true) };
    let mut s = format!("# Run {}\n\ngenerated: {stamp}\n", ctx.run_id);
    if let Some(e) = &eval {
        s.push_str(&format!("evaluated: {}\nseed: {}\nconfig hash: {}\n", e.timestamp, e.seed, e.config_hash));
    }
    let mut files = vec![PATHOLOGY_FILE.to_string()];
    files.extend(SUBGROUP_FILES.iter().map(|(_, n)| n.to_string()));
    files.extend(["metrics_all".to_string(), "detection_iou".to_string()]);
    let mut written = Vec::new();
    for name in files {
        let csv_path = dir.join(format!("{name}.csv"));
        if !csv_path.exists() {
            continue;
        }
        let (header, rows) = read_csv(&csv_path)?;
        let text = std::fs::read_to_string(dir.join(format!("{name}.txt"))).unwrap_or_default();
        let title = text.lines().next().unwrap_or(&name).to_string();
        s.push_str(&format!("\n## {title}\n\nSource: `{name}.csv`\n\n"));
        for r in &rows {
            let cells: Vec<String> = header.iter().zip(r).skip(1).map(|(h, v)| format!("{h} {v}")).collect();
            s.push_str(&format!("- {}: {}\n", r[0], cells.join(", ")));
        }
        if name != "metrics_all" {
            let svg = dir.join(format!("{name}.svg"));
            write_file(&svg, chart(&title, &header, &rows))?;
            s.push_str(&format!("\nChart: `{name}.svg`\n"));
            written.push(svg);
        }
    }
    let out = dir.join(SUMMARY_FILE);
    write_file(&out, s)?;
    written.push(out.clone());
    ctx.run_manifest("report", None, &written)?.save(&dir.join("report.run.json"))?;
    Ok(out)
}
