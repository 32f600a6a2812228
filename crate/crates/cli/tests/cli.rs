use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &[&str] = &[
    "--size",
    "64",
    "--images-per-class",
    "6",
    "--patients-per-class",
    "3",
    "--seed",
    "5",
    "--max-levels",
    "2",
    "--grid-c",
    "-1:3:2",
    "--grid-gamma",
    "-5:-1:2",
    "--inner-folds",
    "2",
];

fn fractex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fractex"))
        .args(SMALL)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = fractex(args);
    assert!(
        out.status.success(),
        "fractex {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn error_json(out: &Output) -> Value {
    assert!(!out.status.success());
    serde_json::from_slice(out.stderr.trim_ascii()).expect("stderr is one JSON document")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_extract_evaluate_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    let feats = tmp.path().join("fd.csv");
    ok(&["synth", "--out", s(&corpus)]);
    assert!(corpus.join("manifest.csv").exists());
    assert_eq!(json(&corpus.join("synth.json"))["images"], 24);

    ok(&["extract", "--input", s(&corpus), "--out", s(&feats)]);
    let text = std::fs::read_to_string(&feats).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# config_hash="));
    let header = lines.next().unwrap();
    assert!(header.ends_with("label,patient"));
    assert_eq!(lines.count(), 24);
    let paths = json(&tmp.path().join("fd.csv.paths.json"));
    assert_eq!(paths["images"].as_array().unwrap().len(), 24);
    assert_eq!(paths["config_hash"].as_str().unwrap().len(), 64);

    let again = tmp.path().join("fd2.csv");
    ok(&["extract", "--input", s(&corpus), "--out", s(&again)]);
    assert_eq!(std::fs::read(&feats).unwrap(), std::fs::read(&again).unwrap());

    let e1 = tmp.path().join("eval1");
    let e2 = tmp.path().join("eval2");
    ok(&["evaluate", "--features", s(&feats), "--out", s(&e1)]);
    ok(&["evaluate", "--features", s(&feats), "--out", s(&e2)]);
    assert_eq!(
        std::fs::read(e1.join("metrics.json")).unwrap(),
        std::fs::read(e2.join("metrics.json")).unwrap()
    );
    let metrics = json(&e1.join("metrics.json"));
    let run = &metrics["runs"][0];
    assert_eq!(run["folds"].as_array().unwrap().len(), 12);
    assert_eq!(run["report"]["per_class"].as_array().unwrap().len(), 4);
    assert!(run["report"]["per_class"][0].get("sensitivity").is_some());
    assert!(e1.join("confusion.csv").exists());
    assert!(e1.join("report.txt").exists());
}

#[test]
fn identical_feature_files_compare_with_unit_p() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    let feats = tmp.path().join("e.csv");
    ok(&["synth", "--out", s(&corpus)]);
    ok(&["--method", "bbs_e", "extract", "--input", s(&corpus), "--out", s(&feats)]);
    let out = tmp.path().join("cmp");
    ok(&["evaluate", "--features", s(&feats), "--features", s(&feats), "--out", s(&out)]);
    let w = json(&out.join("wilcoxon.json"));
    assert_eq!(w["result"]["p_value"].as_f64(), Some(1.0));
    assert!(out.join("confusion_1.csv").exists() && out.join("confusion_2.csv").exists());
}

#[test]
fn select_train_and_score_a_model() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    let feats = tmp.path().join("fd.csv");
    ok(&["synth", "--out", s(&corpus)]);
    ok(&["extract", "--input", s(&corpus), "--out", s(&feats)]);

    let sel = tmp.path().join("sel.json");
    let pruned = tmp.path().join("pruned.csv");
    ok(&["select", "--features", s(&feats), "--out", s(&sel), "--pruned", s(&pruned)]);
    let report = json(&sel);
    let kept = report["selected"].as_array().unwrap().len();
    assert!(kept >= 1);

    let model = tmp.path().join("model.json");
    ok(&["--classifier", "nbc", "train", "--features", s(&feats), "--selection", s(&sel), "--out", s(&model)]);
    assert_eq!(json(&model)["column_names"].as_array().unwrap().len(), kept);

    let scored = tmp.path().join("scored");
    ok(&["evaluate", "--model", s(&model), "--features", s(&pruned), "--out", s(&scored)]);
    assert!(json(&scored.join("metrics.json"))["runs"][0]["report"]["overall_accuracy"].as_f64().unwrap() > 0.5);

    let renamed = tmp.path().join("renamed.csv");
    let text = std::fs::read_to_string(&pruned).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[1] = format!("other_{}", lines[1]);
    std::fs::write(&renamed, lines.join("\n")).unwrap();
    let err = error_json(&fractex(&["evaluate", "--model", s(&model), "--features", s(&renamed), "--out", s(&scored)]));
    assert_eq!(err["error"]["kind"], "input");
    assert!(err["error"]["message"].as_str().unwrap().contains("mismatch"));
}

#[test]
fn empty_manifest_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("manifest.csv"), "filename,label,patient,seed\n").unwrap();
    let out = fractex(&["extract", "--input", s(tmp.path()), "--out", s(&tmp.path().join("f.csv"))]);
    let err = error_json(&out);
    assert_eq!(err["error"]["kind"], "input");
    assert!(err["error"]["message"].as_str().unwrap().contains("no input rows"));
}

#[test]
fn unreadable_files_are_collected_until_a_class_empties() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    ok(&["synth", "--out", s(&corpus)]);
    let rows: Vec<String> = std::fs::read_to_string(corpus.join("manifest.csv"))
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    let victim = rows[1].split(',').next().unwrap().to_string();
    std::fs::write(corpus.join(&victim), b"garbage").unwrap();
    let feats = tmp.path().join("f.csv");
    ok(&["extract", "--input", s(&corpus), "--out", s(&feats)]);
    let paths = json(&tmp.path().join("f.csv.paths.json"));
    let failures = paths["failures"].as_array().unwrap();
    assert!(failures.iter().any(|f| f["filename"] == victim.as_str()));

    let label = rows[1].split(',').nth(1).unwrap();
    for row in &rows[1..] {
        let mut parts = row.split(',');
        let (file, l) = (parts.next().unwrap(), parts.next().unwrap());
        if l == label {
            std::fs::write(corpus.join(file), b"garbage").unwrap();
        }
    }
    let err = error_json(&fractex(&["extract", "--input", s(&corpus), "--out", s(&feats)]));
    assert_eq!(err["error"]["kind"], "data");
}

#[test]
fn deform_writes_a_sheared_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    let warped = tmp.path().join("warped");
    ok(&["synth", "--out", s(&corpus)]);
    ok(&["--deform-count", "2", "--shear", "1,0.4,0,1", "deform", "--input", s(&corpus), "--out", s(&warped)]);
    assert_eq!(
        std::fs::read_to_string(corpus.join("manifest.csv")).unwrap(),
        std::fs::read_to_string(warped.join("manifest.csv")).unwrap()
    );
    let record = json(&warped.join("deform.json"));
    let cells = record["cells"].as_object().unwrap();
    assert_eq!(cells.len(), 24);
    assert!(cells.values().all(|c| c.as_array().unwrap().len() == 2));
    let name = cells.keys().next().unwrap();
    assert_ne!(std::fs::read(corpus.join(name)).unwrap(), std::fs::read(warped.join(name)).unwrap());

    let fixed = tmp.path().join("fixed");
    ok(&["--deform-cells", "5,10", "deform", "--input", s(&corpus), "--out", s(&fixed)]);
    let record = json(&fixed.join("deform.json"));
    assert!(record["cells"].as_object().unwrap().values().all(|c| c == &serde_json::json!([5, 10])));
    let err = error_json(&fractex(&["--deform-cells", "16", "deform", "--input", s(&corpus), "--out", s(&fixed)]));
    assert_eq!(err["error"]["kind"], "parameter");
}

#[test]
fn corpus_evaluation_and_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    ok(&["synth", "--out", s(&corpus)]);
    let out = tmp.path().join("cmp");
    ok(&["--method", "bbs_fd,bbs_e", "evaluate", "--corpus", s(&corpus), "--out", s(&out)]);
    let metrics = json(&out.join("metrics.json"));
    assert_eq!(metrics["runs"].as_array().unwrap().len(), 2);
    assert!(metrics.get("wilcoxon").is_some());

    let sweep = tmp.path().join("sweep");
    ok(&["--classifier", "knn", "sweep", "--corpus", s(&corpus), "--out", s(&sweep)]);
    let r = json(&sweep.join("sweep.json"));
    assert_eq!(r["levels"].as_array().unwrap().len(), 2);
}

#[test]
fn config_file_and_flag_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"seed": 9, "synth": {"size": 64, "images_per_class": 2, "patients_per_class": 2}}"#).unwrap();
    let corpus = tmp.path().join("c");
    let out = Command::new(env!("CARGO_BIN_EXE_fractex"))
        .args(["--config", s(&cfg), "--images-per-class", "4", "synth", "--out", s(&corpus)])
        .output()
        .unwrap();
    assert!(out.status.success());
    let meta = json(&corpus.join("synth.json"));
    assert_eq!(meta["images"], 16);
    assert_eq!(meta["seed"], 9);
    assert_eq!(meta["classes"][0]["spec"]["size"], 64);
}

#[test]
fn usage_and_parameter_errors_are_json() {
    let err = error_json(&fractex(&["frobnicate"]));
    assert_eq!(err["error"]["kind"], "usage");
    let err = error_json(&fractex(&["--lambda", "-1", "synth", "--out", "/nonexistent"]));
    assert_eq!(err["error"]["kind"], "parameter");
    let out = Command::new(env!("CARGO_BIN_EXE_fractex"))
        .env("FRACTEX_THREADS", "zero")
        .args(["synth", "--out", "/nonexistent"])
        .output()
        .unwrap();
    assert_eq!(error_json(&out)["error"]["kind"], "parameter");
}
