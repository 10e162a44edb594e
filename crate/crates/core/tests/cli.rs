use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use multirater::cli;
use multirater::metrics::MetricsReport;

fn exe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_multirater")).args(args).output().unwrap()
}

fn write_config(dir: &Path, variant: &str, extra: serde_json::Value) -> PathBuf {
    let mut cfg = serde_json::json!({
        "version": 1,
        "variant": variant,
        "output_dir": dir.join("run"),
        "generate": {"num_cases": 5, "image_size": 32, "seed": 1},
        "network": {"depth": 2, "base_channels": 4, "num_branches": 3},
        "train": {"epochs": 2, "val_fraction": 0.0, "seed": 1}
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg.as_object_mut().unwrap().insert(k.clone(), v.clone());
    }
    let path = dir.join(format!("{variant}.json"));
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn checksum_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .find(|l| l.starts_with("dataset checksum"))
        .unwrap()
        .to_string()
}

#[test]
fn generate_is_reproducible_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "om", serde_json::json!({}));
    let cfg = cfg.to_str().unwrap();
    let a = exe(&["generate", "--config", cfg, "--seed", "7"]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert!(dir.path().join("run/data/manifest.json").exists());
    assert!(dir.path().join("run/config.json").exists());
    let b = exe(&["generate", "--config", cfg, "--seed", "7"]);
    assert_eq!(checksum_line(&a), checksum_line(&b));
    let c = exe(&["generate", "--config", cfg, "--seed", "8"]);
    assert_ne!(checksum_line(&a), checksum_line(&c));
}

#[test]
fn unwritable_output_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("blocker");
    fs::write(&blocker, b"file, not a directory").unwrap();
    let cfg = write_config(dir.path(), "om", serde_json::json!({"output_dir": blocker.join("run")}));
    let out = exe(&["generate", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains(blocker.to_str().unwrap()));
}

#[test]
fn train_eval_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "omba", serde_json::json!({}));
    let cfg = cfg.to_str().unwrap();
    assert!(exe(&["generate", "--config", cfg]).status.success());
    let t = exe(&["train", "--config", cfg]);
    assert!(t.status.success(), "{}", String::from_utf8_lossy(&t.stderr));
    let run = dir.path().join("run");
    let ckpt = run.join("model.ckpt");
    let first = fs::read(&ckpt).unwrap();
    let log = fs::read_to_string(run.join("train_log.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for key in ["epoch", "loss", "kl", "dice", "lr", "val_q_score"] {
        assert!(log.contains(&format!("\"{key}\"")), "{key}");
    }
    assert!(exe(&["train", "--config", cfg]).status.success());
    assert_eq!(fs::read(&ckpt).unwrap(), first, "retraining changed the checkpoint");

    let manifest = run.join("data/manifest.json");
    let e = exe(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--split",
        "all",
        "--n-mc",
        "4",
        "--emit-maps",
    ]);
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    let report_path = run.join("report.json");
    let report: MetricsReport = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report.per_case.len(), 5);
    let maps: Vec<_> = fs::read_dir(run.join("maps")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(maps.len(), 10);
    assert!(maps.iter().any(|n| n.to_str().unwrap().ends_with("_gamma.png")));

    let other = run.join("report_b.json");
    let mut renamed = report.clone();
    renamed.variant = Some("om".into());
    fs::write(&other, serde_json::to_string(&renamed).unwrap()).unwrap();
    let r = exe(&["report", report_path.to_str().unwrap(), other.to_str().unwrap()]);
    assert!(r.status.success());
    let table = String::from_utf8(r.stdout).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.lines().next().unwrap().contains("similarity"));
}

#[test]
fn ensemble_rater_mismatch_fails_with_both_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "ensemble",
        serde_json::json!({"network": {"depth": 2, "base_channels": 4, "num_branches": 2}}),
    );
    let cfg = cfg.to_str().unwrap();
    assert!(exe(&["generate", "--config", cfg]).status.success());
    let out = exe(&["train", "--config", cfg]);
    assert!(!out.status.success());
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("2 decoder branches") && msg.contains("3 raters"), "{msg}");
}

#[test]
fn report_rejects_missing_and_inconsistent_files() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = exe(&["report", missing.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.json"));

    let bad = dir.path().join("bad.json");
    fs::write(
        &bad,
        r#"{"q_score":0.9,"ged":0.1,"diversity":0.2,"similarity":0.8,
            "per_case":[{"case_id":"a","q_score":0.5,"ged":0.1,"diversity":0.2,"similarity":0.8}]}"#,
    )
    .unwrap();
    let err = cli::load_report(&bad).unwrap_err().to_string();
    assert!(err.contains("q_score"), "{err}");
}

#[test]
fn memorized_case_scores_high() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "om",
        serde_json::json!({
            "generate": {"num_cases": 1, "image_size": 32, "seed": 3, "test_fraction": 0.0},
            "network": {"depth": 3, "base_channels": 8, "num_branches": 3},
            "train": {"optimizer": "adam", "lr0": 0.003, "epochs": 150, "batch_size": 1, "val_fraction": 0.0, "seed": 3}
        }),
    );
    let cfg = cfg.to_str().unwrap();
    assert!(exe(&["generate", "--config", cfg]).status.success());
    assert!(exe(&["train", "--config", cfg]).status.success());
    let run = dir.path().join("run");
    let out = exe(&[
        "eval",
        "--checkpoint",
        run.join("model.ckpt").to_str().unwrap(),
        "--manifest",
        run.join("data/manifest.json").to_str().unwrap(),
        "--split",
        "all",
    ]);
    assert!(out.status.success());
    let report: MetricsReport = serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert!(report.q_score >= 0.95, "q_score {}", report.q_score);
}
