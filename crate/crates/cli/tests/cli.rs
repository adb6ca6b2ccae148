use std::path::Path;
use std::process::{Command, Output};

fn unissr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unissr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = unissr(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write(path: &Path, text: &str) -> String {
    std::fs::write(path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gradcheck_default_passes() {
    let stdout = ok(&["gradcheck"]);
    assert!(stdout.starts_with("gradcheck PASS"), "{stdout}");
    let err: f64 = stdout
        .split_whitespace()
        .find_map(|w| w.strip_prefix("max_rel_error="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(err < 1e-4);
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("run.json"), r#"{"d": 8, "alpha_ssl": 0.1}"#);
    let out = unissr(&["gradcheck", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    assert!(stderr.starts_with("unissr: error[config]:"), "{stderr}");
    assert!(stderr.contains("alpha_ssl"), "{stderr}");
}

#[test]
fn full_pipeline_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let p = |name: &str| d.join(name).to_str().unwrap().to_string();
    let syn = write(
        &d.join("syn.json"),
        r#"{"users": 30, "products": 40, "intents": 4, "interactions": [12, 14]}"#,
    );
    ok(&["gen-data", "--config", &syn, "--out", &p("raw"), "--seed", "3"]);
    assert_eq!(read_json(&d.join("raw/config.resolved.json"))["seed"], 3);
    let boundaries = std::fs::read_to_string(d.join("raw/boundaries.jsonl")).unwrap();
    assert_eq!(boundaries.lines().count(), 60);

    let prep = write(&d.join("prep.json"), r#"{"min_interactions": 5}"#);
    ok(&["preprocess", "--records", &p("raw/records.jsonl"), "--config", &prep, "--out", &p("data")]);
    assert!(d.join("data/manifest.json").exists() && d.join("data/splits.jsonl").exists());

    let run = write(
        &d.join("run.json"),
        r#"{"d": 8, "heads": 2, "layers": 1, "epochs": 1, "finetune_epochs": 1, "batch_size": 32, "eval_negatives": 20, "warmup": 5}"#,
    );
    ok(&["pretrain", "--config", &run, "--data", &p("data"), "--out", &p("pre")]);
    let log = std::fs::read_to_string(d.join("pre/pretrain.log.jsonl")).unwrap();
    let scenarios: Vec<String> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["scenario"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(&scenarios[..2], ["search", "rec"]);
    assert!(d.join("pre/checkpoints/pretrain-epoch001.json").exists());
    assert!(read_json(&d.join("pre/config.resolved.json")).get("alpha").is_some());

    ok(&[
        "finetune",
        "--config",
        &run,
        "--data",
        &p("data"),
        "--checkpoint",
        &p("pre/pretrain.json"),
        "--scenario",
        "rec",
        "--out",
        &p("ft"),
    ]);

    let stdout = ok(&[
        "evaluate",
        "--checkpoint",
        &p("ft/finetune-rec.json"),
        "--data",
        &p("data"),
        "--scenario",
        "rec",
        "--out",
        &p("eval"),
    ]);
    let report = read_json(&d.join("eval/metrics-rec.json"));
    let row: Vec<&str> = stdout.lines().nth(1).unwrap().split_whitespace().collect();
    for (col, key) in [(3, "hr5"), (4, "hr10"), (5, "ndcg5"), (6, "ndcg10")] {
        let shown: f64 = row[col].parse().unwrap();
        assert!((shown - report[key].as_f64().unwrap()).abs() < 5e-5, "{key}");
    }
    // the fine-tuned checkpoint evaluates to what fine-tuning reported
    assert_eq!(read_json(&d.join("ft/metrics-rec.json")), report);
}

#[test]
fn preprocess_from_reviews() {
    let dir = tempfile::tempdir().unwrap();
    let mut lines = String::new();
    for u in 1..=3 {
        for i in 0..12 {
            lines.push_str(&format!(
                "{{\"user\": {u}, \"product\": {}, \"timestamp\": {i}, \"review\": \"nice item {i}\", \"attributes\": [\"cat{}\"]}}\n",
                i % 4 + 1,
                i % 2
            ));
        }
    }
    let raw = write(&dir.path().join("reviews.jsonl"), &lines);
    let prep = write(&dir.path().join("prep.json"), r#"{"min_interactions": 3}"#);
    let out = dir.path().join("data");
    ok(&["preprocess", "--raw-reviews", &raw, "--config", &prep, "--out", out.to_str().unwrap()]);
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["search"]["interactions"], 18);
    assert_eq!(manifest["rec"]["interactions"], 18);
    let words: Vec<String> = serde_json::from_value(read_json(&out.join("words.json"))).unwrap();
    assert!(words.contains(&"cat0".to_string()));
}
