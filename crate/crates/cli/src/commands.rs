use std::collections::HashMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::anyhow;
use clap::{Args, ValueEnum};
use handcascade::cascade::{run_single, Cascade};
use handcascade::dataset::{
    derive_fine_dataset, lint_jsonl, AnnotationRecord, DeriveOptions, RegionSource, Severity, Split,
};
use handcascade::detectors::{
    oracle_from_profile, sidecar_client, Detector, DetectorProfile, Endpoint, Input, Role, SidecarConfig,
};
use handcascade::evaluation::{
    calibrate_profiles, evaluate_with, render, CalibrationError, EvalReport, ExpectedAccuracy, Framework,
    ReportFormat,
};
use handcascade::jsonl::{read_jsonl, write_jsonl};
use handcascade::simulator::{generate_corpus_with, read_manifest, write_manifest, Scene, SimulatorError};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{resolve, Resolved, Settings};
use crate::failure::{Code, Failure, ResultExt};

pub const DECISION_VERSION: u32 = 1;

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Flat TOML configuration file with `version = 1`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output format for human-facing results.
    #[arg(long)]
    pub format: Option<ReportFormat>,
    #[command(flatten)]
    pub settings: Settings,
}

impl Common {
    fn resolve(&self) -> Result<Resolved, Failure> {
        let r = resolve(self.config.as_deref(), &self.settings)?;
        if let Some(n) = r.threads.filter(|&n| n > 1) {
            // a second build in the same process fails; the first pool stays
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        Ok(r)
    }
}

fn io<T, E: Into<anyhow::Error>>(r: Result<T, E>, what: impl FnOnce() -> String) -> Result<T, Failure> {
    r.map_err(Into::into).with_code(Code::Io, what)
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    io(File::create(path), || format!("creating {}", path.display())).map(BufWriter::new)
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    io(std::fs::write(path, text), || format!("writing {}", path.display()))
}

fn write_json(path: &Path, v: &Value) -> Result<(), Failure> {
    let mut s = serde_json::to_string_pretty(v).expect("json value serializes");
    s.push('\n');
    write_text(path, &s)
}

fn write_records<T: Serialize>(path: &Path, items: &[T]) -> Result<(), Failure> {
    io(write_jsonl(create(path)?, items), || format!("writing {}", path.display()))
}

fn meta(command: &str, r: &Resolved, extra: Value) -> Value {
    let mut m = json!({"v": 1, "command": command, "config": r.to_value()});
    if let (Value::Object(m), Value::Object(extra)) = (&mut m, extra) {
        m.extend(extra);
    }
    m
}

pub fn read_scenes(path: &Path) -> Result<Vec<Scene>, Failure> {
    let f = io(File::open(path), || format!("opening manifest {}", path.display()))?;
    read_manifest(BufReader::new(f))
        .map_err(anyhow::Error::from)
        .with_code(Code::Io, || format!("reading manifest {}", path.display()))
}

// ---- simulate

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Manifest to write (JSONL, one scene per line).
    #[arg(long, short)]
    pub out: PathBuf,
}

pub fn simulate(a: &SimulateArgs) -> Result<(), Failure> {
    let r = a.common.resolve()?;
    let scenes = generate_corpus_with(&r.corpus(), r.execution()).map_err(|e| match e {
        SimulatorError::Spec(_) => Failure::new(Code::Usage, e.into()),
        e => Failure::new(Code::Io, e.into()),
    })?;
    io(write_manifest(create(&a.out)?, &scenes), || format!("writing {}", a.out.display()))?;
    write_json(
        &suffixed(&a.out, ".meta.json"),
        &meta("simulate", &r, json!({"scenes": scenes.len()})),
    )?;
    eprintln!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(())
}

// ---- detectors

pub struct Profiles {
    pub single_i: DetectorProfile,
    pub single_ii: DetectorProfile,
    pub coarse: DetectorProfile,
    pub fine: DetectorProfile,
    pub expected: Option<ExpectedAccuracy>,
}

impl Profiles {
    fn to_value(&self) -> Value {
        json!({
            "single_i": self.single_i,
            "single_ii": self.single_ii,
            "coarse": self.coarse,
            "fine": self.fine,
            "expected": self.expected,
        })
    }
}

fn calibration_failure(e: CalibrationError) -> Failure {
    let code = match e {
        CalibrationError::Infeasible { .. } => Code::Calibration,
        CalibrationError::Input(_) => Code::Usage,
    };
    Failure::new(code, anyhow::Error::from(e).context("calibrating oracle profiles"))
}

pub fn profiles(r: &Resolved) -> Result<Profiles, Failure> {
    let pipeline = r.pipeline()?;
    let mut p = match r.targets() {
        None => Profiles {
            single_i: r.perfect_profile(Role::SingleI),
            single_ii: r.perfect_profile(Role::SingleII),
            coarse: r.perfect_profile(Role::Coarse),
            fine: r.perfect_profile(Role::Fine),
            expected: None,
        },
        Some(t) => {
            let c = calibrate_profiles(&t, &r.counts(), &r.conventions(), &pipeline, r.seed)
                .map_err(calibration_failure)?;
            Profiles {
                single_i: c.single_i,
                single_ii: c.single_ii,
                coarse: c.coarse,
                fine: c.fine,
                expected: Some(c.expected),
            }
        }
    };
    for prof in [&mut p.single_i, &mut p.single_ii, &mut p.coarse, &mut p.fine] {
        r.apply_overrides(prof);
        prof.validate()
            .map_err(|m| Failure::new(Code::Usage, anyhow!("{} profile: {m}", prof.role.name())))?;
    }
    Ok(p)
}

fn detector(r: &Resolved, profile: &DetectorProfile, input_size: u32) -> Result<Box<dyn Detector>, Failure> {
    let endpoint = if profile.role.is_pose_scale() {
        &r.sidecar_coarse
    } else {
        &r.sidecar_fine
    };
    match endpoint {
        Some(e) => {
            let endpoint: Endpoint = e
                .parse()
                .map_err(|m| Failure::new(Code::Usage, anyhow!("sidecar endpoint {e:?}: {m}")))?;
            let mut cfg = SidecarConfig::new(endpoint, profile.role);
            cfg.input_size = input_size;
            cfg.timeout = Duration::from_millis(r.sidecar_timeout_ms);
            Ok(Box::new(sidecar_client(cfg)))
        }
        None => {
            let o = oracle_from_profile(*profile).map_err(|m| Failure::new(Code::Usage, anyhow!(m)))?;
            Ok(Box::new(o.with_input_size(input_size)))
        }
    }
}

// ---- calibrate

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Also write the profiles as JSON here.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

pub fn calibrate(a: &CalibrateArgs) -> Result<(), Failure> {
    let r = a.common.resolve()?;
    if r.targets().is_none() {
        return Err(Failure::new(
            Code::Usage,
            anyhow!("perfect oracles need no calibration; pass --detectors yolov5, faster-rcnn or calibrated"),
        ));
    }
    let p = profiles(&r)?;
    let v = meta("calibrate", &r, json!({"profiles": p.to_value()}));
    if let Some(out) = &a.out {
        write_json(out, &v)?;
    }
    match a.common.format.unwrap_or_default() {
        ReportFormat::Json => print!("{}", serde_json::to_string_pretty(&v).expect("json") + "\n"),
        _ => {
            println!("{:<10} {:>10} {:>10} {:>10} {:>7}", "profile", "tp_rate_b", "fp_rate_a", "fp_rate_c", "floor");
            for prof in [&p.single_i, &p.single_ii, &p.coarse, &p.fine] {
                println!(
                    "{:<10} {:>10.6} {:>10.6} {:>10.6} {:>7.3}",
                    prof.role.name(),
                    prof.tp_rate_b,
                    prof.fp_rate_a,
                    prof.fp_rate_c,
                    prof.confidence.floor
                );
            }
            if let Some(e) = p.expected {
                println!(
                    "expected accuracy: single_i {:.4}, single_ii {:.4}, cascade {:.4}",
                    e.single_i, e.single_ii, e.cascade
                );
            }
        }
    }
    Ok(())
}

// ---- run

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FrameworkChoice {
    Cascade,
    SingleI,
    SingleIi,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SingleChoice {
    #[value(name = "I")]
    I,
    #[value(name = "II")]
    Ii,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, short)]
    pub manifest: PathBuf,
    /// Decisions to write (JSONL).
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "cascade", conflicts_with = "single")]
    pub framework: FrameworkChoice,
    /// Run one baseline model instead of the cascade.
    #[arg(long, value_enum)]
    pub single: Option<SingleChoice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub v: u32,
    pub framework: String,
    pub image: String,
    pub decision: Option<bool>,
    /// Best combined score (cascade) or best confidence (single model).
    pub score: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Serialize)]
struct TimingRecord<'a> {
    framework: &'a str,
    image: String,
    total_us: f64,
    coarse_us: Option<f64>,
    fine_us: Option<f64>,
    fusion_us: Option<f64>,
}

fn micros(d: Duration) -> f64 {
    d.as_secs_f64() * 1e6
}

pub fn run(a: &RunArgs) -> Result<(), Failure> {
    let r = a.common.resolve()?;
    let pipeline = r.pipeline()?;
    let scenes = read_scenes(&a.manifest)?;
    let p = profiles(&r)?;
    let exec = r.execution();

    let names: &[&str] = match (a.single, a.framework) {
        (Some(SingleChoice::I), _) | (None, FrameworkChoice::SingleI) => &["single_i"],
        (Some(SingleChoice::Ii), _) | (None, FrameworkChoice::SingleIi) => &["single_ii"],
        (None, FrameworkChoice::Cascade) => &["cascade"],
        (None, FrameworkChoice::All) => &["single_i", "single_ii", "cascade"],
    };

    let mut decisions = Vec::new();
    let mut timings = Vec::new();
    for &name in names {
        let rows: Vec<(DecisionRecord, TimingRecord)> = match name {
            "cascade" => {
                let coarse = detector(&r, &p.coarse, r.coarse_input_size)?;
                let fine = detector(&r, &p.fine, r.fine_input_size)?;
                let cascade = Cascade::new(coarse.as_ref(), fine.as_ref(), pipeline.clone())
                    .map_err(|e| Failure::new(Code::Usage, e.into()))?;
                handcascade::exec::map_collect(exec, &scenes, |s| {
                    let t0 = Instant::now();
                    let out = cascade.run(Input::Scene(s));
                    let total = micros(t0.elapsed());
                    let (decision, score, error, st) = match out {
                        Ok(res) => {
                            let best = res.confirmed.iter().map(|c| c.combined_score).reduce(f64::max);
                            (Some(res.image_decision), best, None, Some(res.timings))
                        }
                        Err(e) => (None, None, Some(e.to_string()), None),
                    };
                    (
                        DecisionRecord {
                            v: DECISION_VERSION,
                            framework: name.to_string(),
                            image: s.image_ref(),
                            decision,
                            score,
                            error,
                        },
                        TimingRecord {
                            framework: name,
                            image: s.image_ref(),
                            total_us: total,
                            coarse_us: st.map(|t| micros(t.coarse)),
                            fine_us: st.map(|t| micros(t.fine)),
                            fusion_us: st.map(|t| micros(t.fusion)),
                        },
                    )
                })
            }
            single => {
                let (profile, tau) = if single == "single_i" {
                    (&p.single_i, pipeline.tau_coarse)
                } else {
                    (&p.single_ii, pipeline.tau_fine)
                };
                let model = detector(&r, profile, r.coarse_input_size)?;
                handcascade::exec::map_collect(exec, &scenes, |s| {
                    let t0 = Instant::now();
                    let out = run_single(model.as_ref(), Input::Scene(s), tau);
                    let total = micros(t0.elapsed());
                    let (decision, score, error) = match out {
                        Ok(res) => {
                            let best = res
                                .detections
                                .iter()
                                .map(|d| d.confidence)
                                .filter(|&c| c >= tau)
                                .reduce(f64::max);
                            (Some(res.decision), best, None)
                        }
                        Err(e) => (None, None, Some(e.to_string())),
                    };
                    (
                        DecisionRecord {
                            v: DECISION_VERSION,
                            framework: name.to_string(),
                            image: s.image_ref(),
                            decision,
                            score,
                            error,
                        },
                        TimingRecord {
                            framework: name,
                            image: s.image_ref(),
                            total_us: total,
                            coarse_us: None,
                            fine_us: None,
                            fusion_us: None,
                        },
                    )
                })
            }
        };
        for (d, t) in rows {
            decisions.push(d);
            timings.push(t);
        }
    }

    write_records(&a.out, &decisions)?;
    write_records(&suffixed(&a.out, ".timings.jsonl"), &timings)?;
    write_json(
        &suffixed(&a.out, ".meta.json"),
        &meta(
            "run",
            &r,
            json!({"model": r.model_name(), "frameworks": names, "profiles": p.to_value()}),
        ),
    )?;

    let failed: Vec<&DecisionRecord> = decisions.iter().filter(|d| d.error.is_some()).collect();
    if let Some(first) = failed.first() {
        return Err(Failure::new(
            Code::Transport,
            anyhow!(
                "{} of {} decisions failed; first on {}: {}",
                failed.len(),
                decisions.len(),
                first.image,
                first.error.as_deref().unwrap_or_default()
            ),
        ));
    }
    eprintln!("wrote {} decisions to {}", decisions.len(), a.out.display());
    Ok(())
}

// ---- evaluate

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, short)]
    pub manifest: PathBuf,
    /// Decision files from `run`; frameworks keep their first-seen order.
    #[arg(long, short, required = true, num_args = 1..)]
    pub decisions: Vec<PathBuf>,
    /// Report to write as JSON.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

fn read_meta(decisions: &Path) -> Option<Value> {
    let text = std::fs::read_to_string(suffixed(decisions, ".meta.json")).ok()?;
    serde_json::from_str(&text).ok()
}

pub fn evaluate(a: &EvaluateArgs) -> Result<(), Failure> {
    let r = a.common.resolve()?;
    let scenes = read_scenes(&a.manifest)?;

    let mut order: Vec<String> = Vec::new();
    let mut table: HashMap<(String, String), Result<bool, String>> = HashMap::new();
    let mut runs = Vec::new();
    for path in &a.decisions {
        let f = io(File::open(path), || format!("opening decisions {}", path.display()))?;
        let recs: Vec<DecisionRecord> = read_jsonl(BufReader::new(f))
            .map_err(anyhow::Error::from)
            .with_code(Code::Io, || format!("reading decisions {}", path.display()))?;
        for d in recs {
            if d.v != DECISION_VERSION {
                return Err(Failure::new(
                    Code::Io,
                    anyhow!("{}: decision version {} unsupported", path.display(), d.v),
                ));
            }
            if !order.contains(&d.framework) {
                order.push(d.framework.clone());
            }
            let outcome = match (d.decision, d.error) {
                (_, Some(e)) => Err(e),
                (Some(b), None) => Ok(b),
                (None, None) => Err("record has neither decision nor error".to_string()),
            };
            let key = (d.framework, d.image);
            if table.insert(key.clone(), outcome).is_some() {
                return Err(Failure::new(
                    Code::Io,
                    anyhow!("{}: duplicate decision for {} on {}", path.display(), key.0, key.1),
                ));
            }
        }
        runs.push(read_meta(path).unwrap_or(Value::Null));
    }

    let frameworks: Vec<Framework<'_>> = order
        .iter()
        .map(|name| {
            let table = &table;
            let name_c = name.clone();
            Framework::new(name.clone(), move |s: &Scene| -> Result<bool, String> {
                table
                    .get(&(name_c.clone(), s.image_ref()))
                    .cloned()
                    .unwrap_or_else(|| Err("no decision recorded".to_string()))
            })
        })
        .collect();
    let mut report = evaluate_with(&frameworks, &scenes, r.execution())
        .map_err(|e| Failure::new(Code::Usage, e.into()))?;
    report.model = r.model.clone().unwrap_or_else(|| {
        runs.iter()
            .find_map(|m| m.get("model").and_then(Value::as_str).map(str::to_owned))
            .unwrap_or_else(|| r.model_name())
    });
    report.config = json!({"evaluate": r.to_value(), "runs": runs});

    if let Some(out) = &a.out {
        let text = render(std::slice::from_ref(&report), ReportFormat::Json).expect("report has frameworks");
        write_text(out, &text)?;
    }
    let shown = render(std::slice::from_ref(&report), a.common.format.unwrap_or_default())
        .map_err(|e| Failure::new(Code::Usage, e.into()))?;
    print!("{shown}");

    if let Some(f) = report
        .frameworks
        .iter()
        .find(|f| f.error_fraction() > r.max_error_fraction)
    {
        return Err(Failure::new(
            Code::Transport,
            anyhow!(
                "{}: {} of {} decisions failed (max_error_fraction {})",
                f.name,
                f.confusion.errors,
                f.confusion.errors + f.confusion.scored(),
                r.max_error_fraction
            ),
        ));
    }
    Ok(())
}

// ---- report

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: Common,
    /// Report JSON files from `evaluate`, one row group per model.
    #[arg(long, short, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

pub fn report(a: &ReportArgs) -> Result<(), Failure> {
    let _ = a.common.resolve()?;
    let mut reports: Vec<EvalReport> = Vec::new();
    for path in &a.input {
        let text = io(std::fs::read_to_string(path), || format!("reading report {}", path.display()))?;
        let v: Value = io(serde_json::from_str(&text), || format!("parsing report {}", path.display()))?;
        let parsed = if v.is_array() {
            serde_json::from_value::<Vec<EvalReport>>(v)
        } else {
            serde_json::from_value::<EvalReport>(v).map(|r| vec![r])
        };
        reports.extend(io(parsed, || format!("parsing report {}", path.display()))?);
    }
    let text = render(&reports, a.common.format.unwrap_or_default()).map_err(|e| Failure::new(Code::Usage, e.into()))?;
    match &a.out {
        Some(out) => write_text(out, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

// ---- derive-fine and lint

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SourceChoice {
    /// Crop around annotated coarse boxes.
    Annotation,
    /// Crop around coarse detections.
    Detection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitChoice {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct DeriveArgs {
    #[command(flatten)]
    pub common: Common,
    /// Scene manifest from `simulate`; ground truth becomes the annotation.
    #[arg(long, short, required_unless_present = "annotations", conflicts_with = "annotations")]
    pub manifest: Option<PathBuf>,
    /// Annotation records (JSONL).
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "annotation")]
    pub source: SourceChoice,
    /// Split assigned to records built from a scene manifest.
    #[arg(long, value_enum, default_value = "train")]
    pub split: SplitChoice,
    #[arg(long, short)]
    pub out: PathBuf,
}

pub fn derive_fine(a: &DeriveArgs) -> Result<(), Failure> {
    let r = a.common.resolve()?;
    let pipeline = r.pipeline()?;
    let (records, mut lint, scenes) = match (&a.manifest, &a.annotations) {
        (Some(m), _) => {
            let scenes = read_scenes(m)?;
            let split = match a.split {
                SplitChoice::Train => Split::Train,
                SplitChoice::Val => Split::Val,
                SplitChoice::Test => Split::Test,
            };
            let recs: Vec<AnnotationRecord> = scenes.iter().map(|s| AnnotationRecord::from_scene(s, split)).collect();
            let map: HashMap<String, Scene> = scenes.into_iter().map(|s| (s.image_ref(), s)).collect();
            (recs, Default::default(), Some(map))
        }
        (None, Some(path)) => {
            let f = io(File::open(path), || format!("opening annotations {}", path.display()))?;
            let (recs, lint) = io(lint_jsonl(BufReader::new(f)), || format!("reading {}", path.display()))?;
            (recs, lint, None)
        }
        (None, None) => unreachable!("clap requires one input"),
    };

    let p;
    let coarse;
    let source = match a.source {
        SourceChoice::Annotation => RegionSource::CoarseAnnotation,
        SourceChoice::Detection => {
            p = profiles(&r)?;
            coarse = detector(&r, &p.coarse, r.coarse_input_size)?;
            RegionSource::CoarseDetection {
                detector: coarse.as_ref(),
                scenes: scenes.as_ref(),
            }
        }
    };
    let opts = DeriveOptions {
        min_retained_fraction: r.min_retained_fraction,
        execution: r.execution(),
    };
    let out = derive_fine_dataset(&records, &pipeline, source, &opts);
    lint.entries.extend(out.lint.entries);

    write_records(&a.out, &out.records)?;
    write_json(
        &suffixed(&a.out, ".lint.json"),
        &serde_json::to_value(&lint).expect("lint serializes"),
    )?;
    write_json(
        &suffixed(&a.out, ".meta.json"),
        &meta(
            "derive-fine",
            &r,
            json!({
                "records": out.records.len(),
                "dropped_fine_boxes": out.dropped_fine_boxes,
                "lint_errors": lint.count(Severity::Error),
                "lint_warnings": lint.count(Severity::Warning),
            }),
        ),
    )?;
    if !lint.is_empty() {
        eprint!("{}", lint.to_text());
    }
    eprintln!("wrote {} fine records to {}", out.records.len(), a.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct LintArgs {
    #[command(flatten)]
    pub common: Common,
    /// Annotation records (JSONL).
    pub annotations: PathBuf,
}

pub fn lint(a: &LintArgs) -> Result<(), Failure> {
    let _ = a.common.resolve()?;
    let f = io(File::open(&a.annotations), || format!("opening {}", a.annotations.display()))?;
    let (_, report) = io(lint_jsonl(BufReader::new(f)), || format!("reading {}", a.annotations.display()))?;
    let mut stdout = std::io::stdout().lock();
    let text = match a.common.format.unwrap_or_default() {
        ReportFormat::Json => serde_json::to_string_pretty(&report).expect("lint serializes") + "\n",
        _ => report.to_text(),
    };
    io(stdout.write_all(text.as_bytes()), || "writing stdout".to_string())
}
