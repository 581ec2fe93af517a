use std::fs;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hybrid-rlvr"))
}

#[test]
fn unknown_config_key_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"learning_rat": 0.1}"#).unwrap();
    let out = bin()
        .args(["gen-tasks", "--config"])
        .arg(&cfg)
        .arg("--out-dir")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
}

#[test]
fn train_eval_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.json");
    fs::write(
        &cfg,
        r#"{"suite": {"arith_count": 30, "context_count": 10},
            "stage1": {"iterations": 12, "eval_interval": 4},
            "stage2": {"epochs": 2}}"#,
    )
    .unwrap();
    let run = |args: &[&str]| {
        let out = bin()
            .args(args)
            .arg("--config")
            .arg(&cfg)
            .arg("--out-dir")
            .arg(dir.path())
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    };
    run(&["gen-tasks"]);
    assert!(dir.path().join("tasks.jsonl").exists());
    assert!(dir.path().join("preferences.json").exists());

    run(&["train-stage1", "--workers", "2"]);
    let metrics = fs::read_to_string(dir.path().join("metrics_stage1.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 12);

    let ckpt = dir.path().join("stage1.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    run(&["train-stage2", "--checkpoint", ckpt]);
    assert!(dir.path().join("stage2.ckpt").exists());

    let report: serde_json::Value =
        serde_json::from_str(&run(&["eval", "--checkpoint", ckpt])).unwrap();
    assert_eq!(report["n_ablated"], 10);
    assert!(report["greedy_accuracy"].as_f64().is_some());

    let csv = bin()
        .args(["report", "--metrics"])
        .arg(dir.path().join("metrics_stage1.jsonl"))
        .output()
        .unwrap();
    assert!(csv.status.success());
    let text = String::from_utf8(csv.stdout).unwrap();
    assert!(text.starts_with("stage,iteration,phase"));
    assert_eq!(text.lines().count(), 13);
}
