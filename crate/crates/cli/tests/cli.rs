use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn scadf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scadf"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn small_config(dir: &Path, extra: &str) -> String {
    let cfg = format!(
        r#"{{"scene": {{"file": "scene.json"}}, "dataset": {{"s": 2}}, "dataset_file": "data.jsonl",
            "model": {{"d": 8, "experts": 2, "depth": 1, "heads": 2}}, "epochs": 1, "batch_size": 16{extra}}}"#
    );
    let name = if extra.is_empty() { "exp.json" } else { "exp_extra.json" };
    fs::write(dir.join(name), cfg).unwrap();
    name.into()
}

#[test]
fn end_to_end_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let o = scadf(d, &["gen-scene", "--preset", "dense", "--seed", "1", "--out", "scene.json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = scadf(d, &["build-dataset", "--scene", "scene.json", "--s", "2", "--locations", "100", "--seed", "2", "--out", "data.jsonl"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read_to_string(d.join("data.jsonl")).unwrap().lines().count() > 0);

    let cfg = small_config(d, "");
    let o = scadf(d, &["--dump-routing", "routing.jsonl", "train", "--config", &cfg, "--out-dir", "run"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.csv", "test.csv", "model.bin", "config.json"] {
        assert!(d.join("run").join(f).exists(), "missing {f}");
    }
    let metrics = fs::read_to_string(d.join("run/metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,split,band,"));
    let routing = fs::read_to_string(d.join("routing.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(routing.lines().next().unwrap()).unwrap();
    assert!(first["dispatch_entropy"].is_array());

    let o = scadf(d, &["eval", "--ckpt", "run/model.bin", "--data", "data.jsonl", "--report", "report.csv"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(d.join("report.csv")).unwrap();
    assert!(report.lines().any(|l| l.contains(",test,all,")));

    let o = scadf(d, &["grad-check", "--config", &cfg]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("0 failures"));

    let o = scadf(d, &["ablate", "--knob", "no_mmd", "--config", &cfg, "--out-dir", "abl"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let saved = fs::read_to_string(d.join("abl/config.json")).unwrap();
    assert!(saved.contains("no_mmd"));

    let bad = small_config(d, r#", "lr": 1e300"#);
    let o = scadf(d, &["train", "--config", &bad, "--out-dir", "nan"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn configuration_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(&scadf(d, &["train", "--config", "missing.json"])), 2);
    fs::write(d.join("unknown.json"), r#"{"epochs": 1, "bogus": true}"#).unwrap();
    assert_eq!(code(&scadf(d, &["train", "--config", "unknown.json"])), 2);
    fs::write(d.join("heads.json"), r#"{"model": {"d": 10, "heads": 3}}"#).unwrap();
    assert_eq!(code(&scadf(d, &["grad-check", "--config", "heads.json"])), 2);
    assert_eq!(code(&scadf(d, &["ablate", "--knob", "nonsense"])), 2);
    assert_eq!(code(&scadf(d, &["eval", "--ckpt", "x.bin", "--data", "y.jsonl", "--report", "r.csv"])), 2);
    assert_eq!(code(&scadf(d, &["build-dataset", "--scene", "none.json", "--out", "o.jsonl"])), 2);
}
