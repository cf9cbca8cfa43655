//! End-to-end tests driving the compiled `tba` binary.

use std::path::Path;
use std::process::{Command, Output};

fn tba(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tba"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawning tba")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn help_and_usage_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let help = tba(&["--help"], dir.path());
    assert_eq!(help.status.code(), Some(0));
    assert!(stdout(&help).contains("train"));

    let bad_flag = tba(&["batch", "--no-such-flag"], dir.path());
    assert_eq!(bad_flag.status.code(), Some(1));

    let bad_subcommand = tba(&["frobnicate"], dir.path());
    assert_eq!(bad_subcommand.status.code(), Some(1));

    let bad_sweep = tba(
        &["sweep", "--parameter", "nonsense", "--values", "1,2"],
        dir.path(),
    );
    assert_eq!(bad_sweep.status.code(), Some(2));
}

#[test]
fn train_attack_oracle_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let trained = tba(&["train", "--checkpoint", "victim.ckpt"], dir.path());
    assert_eq!(trained.status.code(), Some(0), "{trained:?}");
    assert!(dir.path().join("victim.ckpt").exists());
    assert!(stdout(&trained).starts_with("config "));

    let attacked = tba(
        &[
            "attack",
            "--checkpoint",
            "victim.ckpt",
            "--target-idx",
            "3",
            "--t",
            "2",
            "--result",
            "result.json",
        ],
        dir.path(),
    );
    assert_eq!(attacked.status.code(), Some(0), "{attacked:?}");
    let text = std::fs::read_to_string(dir.path().join("result.json")).unwrap();
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(value["config_hash"].is_string());
    assert_eq!(value["seed"], 42);
    assert_eq!(value["result"]["success"], true);
    assert_eq!(value["result"]["n_flip"], 1);

    let oracle = tba(
        &[
            "oracle",
            "--checkpoint",
            "victim.ckpt",
            "--result",
            "result.json",
            "--max-flips",
            "1",
        ],
        dir.path(),
    );
    assert_eq!(oracle.status.code(), Some(0), "{oracle:?}");
    assert!(stdout(&oracle).contains("confirmed"));

    // Asking for the source class itself is an experiment failure.
    let degenerate = tba(
        &[
            "attack",
            "--checkpoint",
            "victim.ckpt",
            "--target-idx",
            "3",
            "--t",
            "0",
            "--result",
            "unused.json",
        ],
        dir.path(),
    );
    assert_eq!(degenerate.status.code(), Some(2));
}

#[test]
fn batch_report_and_tamper_detection() {
    let dir = tempfile::tempdir().unwrap();
    let batch = tba(&["batch", "--trials", "2", "--out", "run"], dir.path());
    assert_eq!(batch.status.code(), Some(0), "{batch:?}");
    let report_path = dir.path().join("run").join("report.json");
    assert!(report_path.exists());
    assert!(dir.path().join("run").join("config.toml").exists());

    let report_arg = report_path.to_str().unwrap();
    let ok = tba(&["report", "--input", report_arg], dir.path());
    assert_eq!(ok.status.code(), Some(0), "{ok:?}");
    assert!(stdout(&ok).contains("aggregates verified"));

    // Corrupt the stored aggregate and expect the check to fail.
    let text = std::fs::read_to_string(&report_path).unwrap();
    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value["asr"] = serde_json::json!(0.123);
    std::fs::write(&report_path, value.to_string()).unwrap();
    let tampered = tba(&["report", "--input", report_arg], dir.path());
    assert_eq!(tampered.status.code(), Some(2));
}
