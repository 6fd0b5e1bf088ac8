use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn dc3(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dc3")).args(args).output().expect("spawn dc3")
}

fn ok(args: &[&str]) -> String {
    let out = dc3(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn synth(dir: &Path, n: usize) {
    ok(&[
        "dataset", "synth", "--k", "2", "--n", &n.to_string(), "--size", "8", "--annotators", "5",
        "--fuzzy-fraction", "0.3", "--supervised-fraction", "0.2", "--seed", "3", "--out", p(dir),
    ]);
}

fn write_config(path: &Path, manifest: &Path, steps: usize) {
    let cfg = serde_json::json!({
        "manifest": manifest,
        "backbone": {"kind": "mlp", "image_size": 8, "widths": [16]},
        "head": {"embedding_dim": 8},
        "batch_size": 8,
        "steps": steps,
        "seed": 4
    });
    fs::write(path, cfg.to_string()).unwrap();
}

#[test]
fn help_is_available_for_every_subcommand() {
    for cmd in [
        vec!["dataset", "synth"],
        vec!["dataset", "validate"],
        vec!["train"],
        vec!["suite"],
        vec!["evaluate"],
        vec!["export-embeddings"],
        vec!["propose"],
        vec!["simulate"],
        vec!["report"],
        vec!["serve"],
    ] {
        let mut args = cmd.clone();
        args.push("--help");
        let out = ok(&args);
        assert!(out.contains("Usage: dc3"), "{cmd:?}");
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(dc3(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(dc3(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(dc3(&["evaluate", "--checkpoint", "x", "--manifest", "y", "--split", "test"]).status.code(), Some(2));
    assert_eq!(dc3(&[]).status.code(), Some(2));
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"batch_size": 1}"#).unwrap();
    let out = dc3(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch_size"));

    fs::write(&cfg, r#"{"learning_rate": 0.1}"#).unwrap();
    assert_eq!(dc3(&["train", "--config", p(&cfg), "--out", p(dir.path())]).status.code(), Some(2));

    fs::write(&cfg, r#"{"backbone": {"kind": "resnet50"}}"#).unwrap();
    assert_eq!(dc3(&["train", "--config", p(&cfg), "--out", p(dir.path())]).status.code(), Some(2));

    let missing = dir.path().join("missing.json");
    assert_eq!(dc3(&["train", "--config", p(&missing), "--out", p(dir.path())]).status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    write_config(&cfg, &dir.path().join("nowhere/manifest.json"), 5);
    let out = dc3(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(1));

    let out = dc3(&["report", "--sessions", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_then_validate() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    synth(&ds, 100);
    let outputs = read_json(&ds.join("outputs.json"));
    let files = outputs["files"].as_array().unwrap();
    assert_eq!(files.len(), 101);
    assert!(files.contains(&Value::from("manifest.json")));
    let out = ok(&["dataset", "validate", p(&ds.join("manifest.json"))]);
    assert!(out.contains("100 items"), "{out}");

    // A dangling image makes validation fail.
    fs::remove_file(ds.join("images/img_00007.png")).unwrap();
    let out = dc3(&["dataset", "validate", p(&ds.join("manifest.json"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("img_00007"));
}

#[test]
fn validate_reports_manifest_problems() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("manifest.json");
    fs::write(
        &m,
        r#"{"name": "x", "class_names": ["a", "b"], "items": [{"id": "i0", "path": "i0.png", "annotations": [{"annotator": "a1", "class_index": 5}]}]}"#,
    )
    .unwrap();
    let out = dc3(&["dataset", "validate", p(&m)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_evaluate_propose_simulate_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    synth(&ds, 80);
    let manifest = ds.join("manifest.json");
    let cfg = dir.path().join("cfg.json");
    write_config(&cfg, &manifest, 10);

    // Flags override config keys.
    let run = dir.path().join("run");
    ok(&["train", "--config", p(&cfg), "--out", p(&run), "--steps", "6", "--ssl", "mean_teacher"]);
    let saved = read_json(&run.join("config.json"));
    assert_eq!(saved["steps"], 6);
    assert_eq!(saved["ssl"]["name"], "mean_teacher");
    let listed = read_json(&run.join("outputs.json"));
    for f in ["config.json", "metrics.json", "loss_history.json", "embeddings.csv", "run.json"] {
        assert!(listed["files"].as_array().unwrap().contains(&Value::from(f)), "{f}");
    }
    let ckpt = fs::read_dir(run.join("checkpoints")).unwrap().next().unwrap().unwrap().path();

    // Validation-split evaluation reproduces the training run's final metrics.
    let eval_out = dir.path().join("eval.json");
    ok(&["evaluate", "--checkpoint", p(&ckpt), "--manifest", p(&manifest), "--out", p(&eval_out)]);
    assert_eq!(read_json(&eval_out), read_json(&run.join("metrics.json")));
    let all: Value = serde_json::from_str(&ok(&[
        "evaluate", "--checkpoint", p(&ckpt), "--manifest", p(&manifest), "--split", "all",
    ]))
    .unwrap();
    assert!(all.is_object());

    let emb = dir.path().join("export/emb.csv");
    let out = ok(&["export-embeddings", "--checkpoint", p(&ckpt), "--manifest", p(&manifest), "--out", p(&emb)]);
    assert!(out.contains("80 rows"), "{out}");

    let props = dir.path().join("proposals/dc3.json");
    ok(&["propose", "--checkpoint", p(&ckpt), "--manifest", p(&manifest), "--mode", "dc3", "--out", p(&props)]);
    assert_eq!(read_json(&props)["mode"], "dc3");
    assert_eq!(dc3(&["propose", "--checkpoint", p(&ckpt), "--manifest", p(&manifest), "--mode", "none", "--out", p(&props)]).status.code(), Some(2));

    let plain = dir.path().join("plain");
    let assisted = dir.path().join("assisted");
    ok(&["simulate", "--manifest", p(&manifest), "--annotators", "2", "--repetitions", "2", "--out", p(&plain)]);
    ok(&[
        "simulate", "--manifest", p(&manifest), "--proposals", p(&props), "--annotators", "2", "--repetitions", "2",
        "--seed", "1", "--out", p(&assisted),
    ]);
    let logs = fs::read_dir(&plain).unwrap().filter(|e| {
        e.as_ref().unwrap().path().extension().is_some_and(|x| x == "jsonl")
    });
    assert_eq!(logs.count(), 4);

    let report_path = dir.path().join("report.json");
    ok(&["report", "--sessions", p(&plain), p(&assisted), "--out", p(&report_path)]);
    let report = read_json(&report_path);
    assert!(report.is_object());
    let text = report.to_string();
    assert!(text.contains("\"dc3\"") && text.contains("\"none\""), "{text}");
}

#[test]
fn suite_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    synth(&ds, 60);
    let cfg = dir.path().join("cfg.json");
    write_config(&cfg, &ds.join("manifest.json"), 4);
    let out_dir = dir.path().join("suite");
    let table = ok(&["suite", "--config", p(&cfg), "--seeds", "2", "--out", p(&out_dir), "--method", "vanilla"]);
    let lines: Vec<&str> = table.lines().collect();
    assert!(lines[0].contains("F1") && lines[0].contains("diff"), "{table}");
    assert!(lines[1].starts_with('4') && lines[2].starts_with('5'), "{table}");
    assert!(table.contains("mean"), "{table}");
    assert!(out_dir.join("summary.json").is_file());
    assert!(out_dir.join("seed_4/metrics.json").is_file());
    assert!(out_dir.join("seed_5/metrics.json").is_file());
    assert_eq!(dc3(&["suite", "--config", p(&cfg), "--seeds", "0", "--out", p(&out_dir)]).status.code(), Some(2));
}
