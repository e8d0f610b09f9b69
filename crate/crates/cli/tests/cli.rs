use std::path::Path;
use std::process::{Command, Output};

use handcascade::cascade::{run_single, PipelineConfig};
use handcascade::detectors::{oracle_from_profile, DetectorProfile, Input, Role};
use handcascade::rng;
use handcascade::simulator::{read_manifest, Scene};
use serde_json::Value;

fn bin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_handcascade"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = bin(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn scenes(path: &Path) -> Vec<Scene> {
    read_manifest(std::io::BufReader::new(std::fs::File::open(path).unwrap())).unwrap()
}

#[test]
fn simulate_counts_and_repeatability() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["simulate", "--b", "450", "--a", "200", "--c", "200", "--seed", "1", "-o", "one.jsonl"]);
    ok(p, &["simulate", "--b", "450", "--a", "200", "--c", "200", "--seed", "1", "-o", "two.jsonl"]);
    assert_eq!(lines(&p.join("one.jsonl")).len(), 850);
    assert_eq!(std::fs::read(p.join("one.jsonl")).unwrap(), std::fs::read(p.join("two.jsonl")).unwrap());
    let meta: Value = serde_json::from_str(&std::fs::read_to_string(p.join("one.jsonl.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["config"]["seed"], 1);
    assert_eq!(meta["config"]["b"], 450);

    let out = bin(p, &["simulate", "--b", "0", "--a", "0", "--c", "0", "-o", "zero.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn perfect_oracles_reproduce_labels() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["simulate", "--seed", "3", "-o", "m.jsonl"]);
    ok(p, &["run", "--seed", "3", "-m", "m.jsonl", "-o", "d.jsonl"]);
    let truth = scenes(&p.join("m.jsonl"));
    let decisions = lines(&p.join("d.jsonl"));
    assert_eq!(decisions.len(), truth.len());
    for (d, s) in decisions.iter().zip(&truth) {
        assert_eq!(d["image"], s.image_ref());
        assert_eq!(d["decision"], s.label);
        assert_eq!(d["framework"], "cascade");
    }
    let md = ok(p, &["evaluate", "-m", "m.jsonl", "-d", "d.jsonl", "--format", "markdown"]);
    assert_eq!(
        md,
        "| Models | Frameworks | Accuracy |\n|---|---|---|\n| Perfect oracles | **Coarse-to-fine Models** | **1.000** |\n"
    );
    // timings go to their own file
    assert_eq!(lines(&p.join("d.jsonl.timings.jsonl")).len(), truth.len());
    assert!(!std::fs::read_to_string(p.join("d.jsonl")).unwrap().contains("_us"));
}

#[test]
fn single_flag_matches_library_baseline() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["simulate", "--seed", "4", "-o", "m.jsonl"]);
    let rates = ["--single-i-tp-rate-b", "0.8", "--single-i-fp-rate-a", "0.6", "--single-i-fp-rate-c", "0.3"];
    let mut args = vec!["run", "--seed", "4", "--single", "I", "-m", "m.jsonl", "-o", "d.jsonl"];
    args.extend(rates);
    ok(p, &args);

    let mut prof = DetectorProfile::perfect(Role::SingleI, rng::derive_seed(4, rng::stream_id("single_i")));
    (prof.tp_rate_b, prof.fp_rate_a, prof.fp_rate_c) = (0.8, 0.6, 0.3);
    let model = oracle_from_profile(prof).unwrap();
    let tau = PipelineConfig::default().tau_coarse;
    let decisions = lines(&p.join("d.jsonl"));
    let mut positives = 0;
    for (d, s) in decisions.iter().zip(scenes(&p.join("m.jsonl"))) {
        let want = run_single(&model, Input::Scene(&s), tau).unwrap().decision;
        assert_eq!(d["decision"], want, "{}", s.image_ref());
        assert_eq!(d["framework"], "single_i");
        positives += usize::from(want);
    }
    assert!(positives > 300 && positives < 700, "{positives}");
}

#[test]
fn transport_failure_is_distinct_from_negatives() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["simulate", "--seed", "5", "--b", "3", "--a", "3", "--c", "3", "-o", "m.jsonl"]);

    // all-negative run: zero exit
    let out = bin(p, &["run", "-m", "m.jsonl", "-o", "neg.jsonl", "--coarse-tp-rate-b", "0"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(lines(&p.join("neg.jsonl")).iter().all(|d| d["decision"] == false));

    let out = bin(p, &["run", "-m", "m.jsonl", "-o", "down.jsonl", "--sidecar-coarse", "tcp://127.0.0.1:1"]);
    assert_eq!(out.status.code(), Some(3));
    let recs = lines(&p.join("down.jsonl"));
    assert!(recs.iter().all(|d| d["decision"].is_null() && d["error"].is_string()));

    // the failed decisions are counted, not scored, and trip the error budget
    let out = bin(p, &["evaluate", "-m", "m.jsonl", "-d", "down.jsonl", "--format", "json"]);
    assert_eq!(out.status.code(), Some(3));
    let rep: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rep["frameworks"][0]["errors"], 9);
    let out = bin(p, &["evaluate", "-m", "m.jsonl", "-d", "down.jsonl", "--max-error-fraction", "1"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn missing_input_names_the_path() {
    let d = tempfile::tempdir().unwrap();
    let out = bin(d.path(), &["run", "-m", "absent-manifest.jsonl", "-o", "d.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent-manifest.jsonl"));
    let out = bin(d.path(), &["report", "-i", "absent-report.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent-report.json"));
}

#[test]
fn usage_errors_exit_one() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(bin(d.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(bin(d.path(), &["run", "-m", "x"]).status.code(), Some(1));
    assert_eq!(bin(d.path(), &["calibrate"]).status.code(), Some(1));
    assert_eq!(bin(d.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn infeasible_calibration_exits_four() {
    let d = tempfile::tempdir().unwrap();
    let out = bin(d.path(), &["calibrate", "--detectors", "calibrated", "--target-cascade", "0.4"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fine.fp_rate_c"));
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    std::fs::write(p.join("run.toml"), "version = 1\nseed = 8\nb = 5\na = 4\nc = 3\ntau_fine = 0.6\n").unwrap();
    ok(p, &["simulate", "--config", "run.toml", "--c", "1", "-o", "m.jsonl"]);
    assert_eq!(lines(&p.join("m.jsonl")).len(), 10);
    let meta: Value = serde_json::from_str(&std::fs::read_to_string(p.join("m.jsonl.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["config"]["seed"], 8);
    assert_eq!(meta["config"]["tau_fine"], 0.6);
    assert_eq!(meta["config"]["tau_coarse"], 0.25);

    std::fs::write(p.join("bad.toml"), "seed = 8\n").unwrap();
    assert_eq!(bin(p, &["simulate", "--config", "bad.toml", "-o", "x.jsonl"]).status.code(), Some(1));
}

#[test]
fn calibrated_chain_renders_accuracy_table() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["simulate", "--seed", "1", "-o", "m.jsonl"]);
    for (det, out) in [("yolov5", "y.jsonl"), ("faster-rcnn", "f.jsonl")] {
        ok(p, &["run", "--seed", "1", "--detectors", det, "--framework", "all", "-m", "m.jsonl", "-o", out]);
    }
    ok(p, &["evaluate", "-m", "m.jsonl", "-d", "y.jsonl", "-o", "y.json"]);
    ok(p, &["evaluate", "-m", "m.jsonl", "-d", "f.jsonl", "-o", "f.json"]);
    let md = ok(p, &["report", "-i", "y.json", "f.json", "--format", "markdown"]);
    let rows: Vec<&str> = md.lines().collect();
    assert_eq!(rows[0], "| Models | Frameworks | Accuracy |");
    assert_eq!(rows.len(), 8);
    assert!(rows[2].starts_with("| Yolov5 | Single Model I | "));
    assert!(rows[4].starts_with("|  | **Coarse-to-fine Models** | **"));
    assert!(rows[5].starts_with("| Faster RCNN | Single Model I | "));

    let rep: Value = serde_json::from_str(&std::fs::read_to_string(p.join("y.json")).unwrap()).unwrap();
    assert_eq!(rep["model"], "Yolov5");
    assert_eq!(rep["config"]["runs"][0]["config"]["detectors"], "yolov5");
    let fw = rep["frameworks"].as_array().unwrap();
    for f in fw {
        let n: u64 = ["tp", "fp", "tn", "fn"].iter().map(|k| f[k].as_u64().unwrap()).sum();
        assert_eq!(n, 850);
    }
    // JSON output of report round-trips the stored report
    let json = ok(p, &["report", "-i", "y.json", "--format", "json"]);
    assert_eq!(serde_json::from_str::<Value>(&json).unwrap(), rep);
}

#[test]
fn derive_fine_from_simulated_manifest() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["simulate", "--seed", "6", "-o", "m.jsonl"]);
    ok(p, &["derive-fine", "-m", "m.jsonl", "-o", "fine.jsonl"]);
    let recs = lines(&p.join("fine.jsonl"));
    assert_eq!(recs.len(), 450);
    assert!(recs.iter().all(|r| r["source"] == "coarse_annotation" && r["split"] == "train"));

    ok(p, &["derive-fine", "-m", "m.jsonl", "--source", "detection", "--seed", "6", "-o", "det.jsonl"]);
    let recs = lines(&p.join("det.jsonl"));
    assert_eq!(recs.len(), 450);
    assert!(recs.iter().all(|r| r["source"] == "coarse_detection"));
}

#[test]
fn lint_reports_duplicates() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let rec = r#"{"item_id":"x","image_ref":"img.jpg","image_bounds":[0.0,0.0,100.0,100.0],"coarse_boxes":[[10.0,10.0,50.0,50.0]],"fine_boxes":[],"split":"train","provenance":"manual"}"#;
    std::fs::write(p.join("ann.jsonl"), format!("{rec}\n{}\n", rec.replace("img.jpg", "other.jpg"))).unwrap();
    let text = ok(p, &["lint", "ann.jsonl"]);
    assert!(text.contains("1 error(s), 0 warning(s)"), "{text}");
    let json: Value = serde_json::from_str(&ok(p, &["lint", "ann.jsonl", "--format", "json"])).unwrap();
    assert_eq!(json["entries"].as_array().unwrap().len(), 1);
}
