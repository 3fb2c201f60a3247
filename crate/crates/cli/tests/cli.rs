use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recess-cad"))
        .args(args)
        .env("RECESS_CAD_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

/// 12 phantoms of 64x64 with three folds.
fn small_dataset(root: &Path) {
    ok(&["synth", "--n", "12", "--seed", "1", "--size", "64", "--out", &s(&root.join("data"))]);
    ok(&["split", "--manifest", &s(&root.join("data/manifest.jsonl")), "--k", "3", "--out", &s(&root.join("folds.json"))]);
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(cli(&["--help"]).status.code(), Some(0));
    assert_eq!(cli(&["--version"]).status.code(), Some(0));
}

#[test]
fn unknown_subcommand_is_a_user_error() {
    assert_eq!(cli(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(cli(&["train", "--mode", "yolo"]).status.code(), Some(1));
}

#[test]
fn missing_input_reports_json_trailer() {
    let out = cli(&["--json-errors", "split", "--manifest", "/nonexistent/manifest.jsonl", "--out", "/tmp/x.json"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    let last = stderr.lines().last().unwrap();
    let v: serde_json::Value = serde_json::from_str(last).unwrap();
    assert_eq!(v["kind"], "user");
    assert_eq!(v["exit_code"], 1);
}

#[test]
fn synth_writes_manifest_and_images() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    ok(&["synth", "--n", "7", "--seed", "4", "--size", "64", "--raw", "--out", &s(&out)]);
    let manifest = std::fs::read_to_string(out.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 7);
    for line in manifest.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(out.join(v["image_path"].as_str().unwrap()).exists());
        assert_eq!(v["width"], 64);
    }
    assert_eq!(std::fs::read_dir(out.join("raw")).unwrap().filter(|e| {
        e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")
    }).count(), 7);
}

#[test]
fn dump_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let first = ok(&["train", "--mode", "multitask", "--epochs", "7", "--lr", "0.02", "--dump-config"]);
    let path = dir.path().join("config.json");
    std::fs::write(&path, &first).unwrap();
    let second = ok(&["train", "--config", &s(&path), "--dump-config"]);
    assert_eq!(first, second);
    let v: serde_json::Value = serde_json::from_str(&first).unwrap();
    assert_eq!(v["train"]["max_epochs"], 7);
    assert_eq!(v["train"]["patience"], 7);
}

#[test]
fn config_with_unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&ok(&["train", "--mode", "detection", "--dump-config"])).unwrap();
    v["warmup"] = serde_json::json!(3);
    let path = dir.path().join("bad.json");
    std::fs::write(&path, v.to_string()).unwrap();
    assert_eq!(cli(&["train", "--config", &s(&path), "--dump-config"]).status.code(), Some(1));
}

#[test]
fn input_size_must_match_images() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    let out = cli(&[
        "train", "--mode", "detection", "--manifest", &s(&dir.path().join("data/manifest.jsonl")),
        "--folds", &s(&dir.path().join("folds.json")), "--epochs", "1", "--out", &s(&dir.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("shape mismatch"));
}

#[test]
fn train_eval_infer_round() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    small_dataset(root);
    let run = root.join("run");
    let table = ok(&[
        "train", "--mode", "multitask", "--manifest", &s(&root.join("data/manifest.jsonl")),
        "--folds", &s(&root.join("folds.json")), "--fold", "1", "--epochs", "2", "--input-size", "64",
        "--out", &s(&run),
    ]);
    assert!(table.contains("Balanced accuracy") && table.contains("fold 1"), "{table}");
    for f in ["model.ckpt", "history.jsonl", "report.json", "config.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    assert_eq!(std::fs::read_to_string(run.join("history.jsonl")).unwrap().lines().count(), 2);

    let ckpt = s(&run.join("model.ckpt"));
    let report = root.join("eval.json");
    ok(&["eval", "--checkpoint", &ckpt, "--manifest", &s(&root.join("data/manifest.jsonl")), "--out", &s(&report)]);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(v["balanced_accuracy"].as_f64().is_some());

    let image = root.join("data/images/phantom_000000.png");
    let overlay = root.join("overlay.png");
    let line = ok(&["infer", "--checkpoint", &ckpt, "--image", &s(&image), "--gt", "5,20,50,30", "--out", &s(&overlay)]);
    let rec: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(rec["mode"], "MultiTask");
    assert!(overlay.exists());

    // a 256-pixel dataset cannot be evaluated by a 64-pixel model
    ok(&["synth", "--n", "3", "--seed", "2", "--out", &s(&root.join("big"))]);
    let out = cli(&["eval", "--checkpoint", &ckpt, "--manifest", &s(&root.join("big/manifest.jsonl")), "--split", "all"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn preprocess_crops_raw_frames() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(&["synth", "--n", "3", "--seed", "6", "--size", "64", "--raw", "--out", &s(&root.join("d"))]);
    ok(&["preprocess", "--in", &s(&root.join("d/raw")), "--out", &s(&root.join("crops")), "--size", "96"]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("crops/report.json")).unwrap()).unwrap();
    assert_eq!(report["crops"].as_object().unwrap().len(), 3);
    assert!(report["failures"].as_object().unwrap().is_empty());
    let crop = image::open(root.join("crops/phantom_000000.png")).unwrap();
    assert_eq!((crop.width(), crop.height()), (96, 96));
}
