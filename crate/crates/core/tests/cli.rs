use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use densematch::synth::procedural_image;

fn densematch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_densematch"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = densematch(&["train", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn end_to_end_generate_train_match_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = densematch(&["gen-data", "--procedural", "--count", "4", "--size", "32", "--seed", "3", "--out", p(&data)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("manifest.json").is_file());

    let config = dir.path().join("train.json");
    fs::write(
        &config,
        r#"{"model": {"blocks": 1, "channels": 8}, "batch_size": 2, "grid_rows": 8, "grid_cols": 8,
            "epochs": 1, "image_size": 32, "checkpoint_every": 1}"#,
    )
    .unwrap();
    let run = dir.path().join("run");
    let out = densematch(&["train", "--data", p(&data), "--config", p(&config), "--out", p(&run)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = run.join("step_000002.cndl");
    assert!(ckpt.is_file());
    assert_eq!(fs::read_to_string(run.join("loss.csv")).unwrap().lines().count(), 3);

    let out = densematch(&["train", "--data", p(&data), "--config", p(&config), "--out", p(&run), "--resume"]);
    assert_eq!(out.status.code(), Some(0));

    let a = data.join("000000_a.png");
    let b = data.join("000000_b.png");
    let matches = dir.path().join("m.csv");
    let out = densematch(&["match", "--checkpoint", p(&ckpt), "--image-a", p(&a), "--image-b", p(&b), "--stride", "4", "--out", p(&matches)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(&matches).unwrap();
    assert!(csv.starts_with("xa,ya,xb,yb,score,mutual\n"));
    assert_eq!(csv.lines().count(), 64 + 1);

    let big = dir.path().join("big.png");
    procedural_image(40, 32, 1).unwrap().save_png(&big).unwrap();
    let out = densematch(&["match", "--checkpoint", p(&ckpt), "--image-a", p(&a), "--image-b", p(&big)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("32×32") && err.contains("40×32"), "{err}");

    for stride in ["2", "4"] {
        let report = dir.path().join(format!("eval{stride}"));
        let out = densematch(&[
            "eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--stride", stride, "--mutual",
            "--ransac-threshold", "2.5", "--seed", "9", "--out", p(&report),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(report.join("eval_summary.json")).unwrap()).unwrap();
        assert_eq!(summary["config"]["stride_px"], stride.parse::<u64>().unwrap());
        assert_eq!(summary["config"]["mutual_only"], true);
        assert_eq!(summary["config"]["ransac"]["threshold_px"], 2.5);
        assert_eq!(summary["checkpoint_digest"].as_str().unwrap().len(), 64);
    }

    let out = densematch(&["overfit", "--data", p(&data), "--pair-id", "1", "--config", p(&config), "--max-steps", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["steps"], 3);
}

#[test]
fn selftest_passes() {
    let out = densematch(&["selftest"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{text}");
    assert!(!text.contains("FAIL"));
}
