use std::path::Path;
use std::process::{Command, Output};

fn hmws(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hmws"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn testbed_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let out = hmws(&[
        "gen-data",
        "--domain",
        "testbed",
        "--seed",
        "3",
        "--count",
        "40",
        "--out",
        s(&data),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let cfg = dir.path().join("cfg.json");
    let json = serde_json::json!({
        "domain": "testbed",
        "method": "hmws",
        "iterations": 6,
        "minibatch": 4,
        "eval_interval": 3,
        "eval_size": 10,
        "s_test": 20,
        "output": run,
        "data": { "path": data },
    });
    std::fs::write(&cfg, json.to_string()).unwrap();
    let out = hmws(&["train", "--config", s(&cfg)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);

    let ckpt = run.join("checkpoints").join("iter_00000006");
    let out = hmws(&["eval", "--ckpt", s(&ckpt), "--s-test", "5"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["values"].as_array().unwrap().len(), 40);
    assert!(summary["median"].as_f64().unwrap().is_finite());

    let out = hmws(&["export-plots", "--run", s(&run)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let curve = std::fs::read_to_string(run.join("plots").join("learning_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 4);
}

#[test]
fn invalid_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"domain": "testbed", "method": "vimco", "iterations": 1, "S": 1, "output": "x"}"#,
    )
    .unwrap();
    assert_eq!(hmws(&["train", "--config", s(&cfg)]).status.code(), Some(2));
    std::fs::write(
        &cfg,
        r#"{"domain": "testbed", "method": "hmws", "iterations": 1, "output": "x", "typo": 1}"#,
    )
    .unwrap();
    assert_eq!(hmws(&["train", "--config", s(&cfg)]).status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    assert_eq!(
        hmws(&["eval", "--ckpt", s(&missing)]).status.code(),
        Some(3)
    );
    assert_eq!(
        hmws(&["export-plots", "--run", s(&missing)]).status.code(),
        Some(3)
    );
}
