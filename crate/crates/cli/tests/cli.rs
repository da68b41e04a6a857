use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn timme(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_timme"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = timme(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_train_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&["generate", "--out", s(&data), "--nodes", "120", "--seed", "3"]);
    let conf = data.join("timme.conf");
    assert!(conf.exists());

    let out = ok(&[
        "train", "--config", s(&conf), "--mode", "hierarchical", "--epochs", "5", "--out", s(&run),
    ]);
    assert!(out.contains("test accuracy"), "{out}");
    for f in ["run.conf", "model.ckpt", "train_log.jsonl", "metrics.json", "manifest.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 5);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["epoch"], 1);
    assert_eq!(first["alphas"].as_array().unwrap().len(), 2);
    assert_eq!(first["lambda"].as_array().unwrap().len(), 3);

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["mode"], "hierarchical");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);

    // Re-evaluating the checkpoint reproduces the stored metrics.
    let evaluated: serde_json::Value = serde_json::from_str(&ok(&["evaluate", "--run", s(&run)])).unwrap();
    let stored: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(evaluated, stored);

    ok(&["predict", "--run", s(&run), "--embeddings", s(&run.join("emb.tsv"))]);
    let preds = fs::read_to_string(run.join("predictions.tsv")).unwrap();
    assert_eq!(preds.lines().count(), 120);
    let cols: Vec<&str> = preds.lines().next().unwrap().split('\t').collect();
    assert_eq!(cols.len(), 4);
    let p0: f64 = cols[1].parse().unwrap();
    let p1: f64 = cols[2].parse().unwrap();
    assert!((p0 + p1 - 1.0).abs() < 1e-12);

    let p: f64 = ok(&["predict", "--run", s(&run), "--link", "u0000,reply,u0001"]).trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&p));

    ok(&["report", "--run", s(&run)]);
    let lambda: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("lambda.json")).unwrap()).unwrap();
    let keys: Vec<&String> = lambda.as_object().unwrap().keys().collect();
    assert_eq!(keys.len(), 3);
    let total: f64 = lambda.as_object().unwrap().values().map(|v| v.as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);
    assert!(fs::read_to_string(run.join("geo.tsv")).unwrap().starts_with("region\tusers"));
}

#[test]
fn relation_subset_and_crossrel() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["generate", "--out", s(&data), "--nodes", "80", "--intra", "0.15", "--label-fraction", "0.25"]);
    let conf = data.join("timme.conf");
    let run = dir.path().join("run");
    ok(&[
        "train", "--config", s(&conf), "--relations", "follow,retweet", "--epochs", "2", "--out", s(&run),
    ]);
    let metrics = fs::read_to_string(run.join("metrics.json")).unwrap();
    assert!(metrics.contains("retweet") && !metrics.contains("reply"));

    let cr = dir.path().join("cr");
    let text = ok(&["crossrel", "--config", s(&conf), "--epochs", "2", "--out", s(&cr)]);
    assert_eq!(text.lines().count(), 4);
    let table: serde_json::Value = serde_json::from_str(&fs::read_to_string(cr.join("crossrel.json")).unwrap()).unwrap();
    assert_eq!(table["values"].as_array().unwrap().len(), 3);
}

#[test]
fn mode_guards() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["generate", "--out", s(&data), "--nodes", "80", "--intra", "0.15", "--label-fraction", "0.25"]);
    let conf = data.join("timme.conf");
    let run = dir.path().join("link");
    ok(&["train", "--config", s(&conf), "--mode", "single_link(follow)", "--epochs", "2", "--out", s(&run)]);
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    let entry: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    let tasks: Vec<&str> = entry["steps"][0]["losses"]
        .as_array()
        .unwrap()
        .iter()
        .map(|l| l["task"].as_str().unwrap())
        .collect();
    assert_eq!(tasks, ["follow"]);

    assert!(!timme(&["evaluate", "--run", s(&run), "--task", "classification"]).status.success());
    ok(&["evaluate", "--run", s(&run), "--task", "links"]);
    let out = timme(&["report", "--run", s(&run), "--lambda"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("hierarchical"));
}

#[test]
fn missing_edge_file_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["generate", "--out", s(&data), "--nodes", "60"]);
    fs::remove_file(data.join("reply.tsv")).unwrap();
    let out = timme(&["train", "--config", s(&data.join("timme.conf")), "--out", s(&dir.path().join("run"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("reply.tsv"));
}

#[test]
fn filter_keeps_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["generate", "--out", s(&data), "--nodes", "100"]);
    let sub = dir.path().join("sub");
    let out = ok(&["filter", "--config", s(&data.join("timme.conf")), "--range", "{inf}", "--out", s(&sub)]);
    assert!(out.contains("kept 10 of 100"), "{out}");
    let conf = fs::read_to_string(sub.join("timme.conf")).unwrap();
    assert!(conf.contains("labels = "));
}

#[test]
fn errors_exit_nonzero_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    fs::write(&conf, "edges = a.tsv\nlearning_rate = 1\n").unwrap();
    let out = timme(&["train", "--config", s(&conf), "--out", s(dir.path())]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("learning_rate") && err.contains("bad.conf:2:"), "{err}");

    let out = timme(&["evaluate", "--run", s(dir.path())]);
    assert!(!out.status.success());
}
