use std::path::Path;
use std::process::{Command, Output};

use acp_core::detector::Checkpoint;
use serde_json::Value;

fn acp(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acp"))
        .arg("--config")
        .arg(config)
        .args(args)
        .env_remove("ACP_DATA_DIR")
        .env_remove("ACP_WORK_DIR")
        .output()
        .unwrap()
}

fn ok(out: Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn error_line(out: &Output) -> Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().unwrap();
    serde_json::from_str(last).unwrap()
}

fn write_config(dir: &Path, work: &str, extra: &str) -> std::path::PathBuf {
    let path = dir.join(format!("{work}.toml"));
    let text = format!(
        "[paths]\ndata_dir = {:?}\nwork_dir = {:?}\n[synth]\nwidth = 256\nheight = 128\n[roi]\nmargin_px = 10.0\n[detector]\niterations = 4\nval_interval = 2\n{extra}",
        dir.join("data"),
        dir.join(work),
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn stages_chain_and_write_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "work", "");
    let synth = ok(acp(&cfg, &["synth", "--n", "12", "--prevalence", "0.5", "--seed", "5"]));
    assert_eq!(synth["positives"], 6);
    let prep = ok(acp(&cfg, &["prepare"]));
    assert_eq!(prep["train"].as_u64().unwrap() + prep["val"].as_u64().unwrap() + prep["test"].as_u64().unwrap(), 12);

    let infer = acp(&cfg, &["infer", "--image-id", "phantom_0000"]);
    assert_eq!(error_line(&infer)["error"]["kind"], "missing_checkpoint");

    ok(acp(&cfg, &["train", "--serial"]));
    let work = dir.path().join("work");
    let curve = std::fs::read_to_string(work.join("loss_curve.csv")).unwrap();
    assert!(curve.starts_with("step,rpn_cls,rpn_reg,head_cls,head_reg,total,split"));
    assert_eq!(curve.lines().filter(|l| l.ends_with(",train")).count(), 4);

    let out = dir.path().join("viz");
    let doc = ok(acp(&cfg, &["infer", "--image-id", "phantom_0000", "--threshold", "0", "--out", out.to_str().unwrap()]));
    for f in ["original.png", "roi_left.png", "roi_right.png", "overlay.png", "detections.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_eq!(doc["width"], 256);

    let report = ok(acp(&cfg, &["eval", "--serial"]));
    assert!(report["auc"].as_f64().unwrap() >= 0.0);
    assert!(work.join("eval/report.json").exists());
    assert!(work.join("eval/roc.png").exists());
    let per_side = ok(acp(&cfg, &["eval", "--per-side"]));
    assert_eq!(
        per_side["n_pos"].as_u64().unwrap() + per_side["n_neg"].as_u64().unwrap(),
        2 * prep["test"].as_u64().unwrap()
    );
}

#[test]
fn training_twice_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_config(dir.path(), "a", "");
    let b = write_config(dir.path(), "b", "");
    ok(acp(&a, &["synth", "--n", "10", "--prevalence", "0.6"]));
    for cfg in [&a, &b] {
        ok(acp(cfg, &["prepare", "--seed", "9"]));
    }
    ok(acp(&a, &["train", "--seed", "4", "--serial"]));
    ok(acp(&b, &["train", "--seed", "4"]));
    let ca = Checkpoint::load(&dir.path().join("a/model.ckpt")).unwrap();
    let mut cb = Checkpoint::load(&dir.path().join("b/model.ckpt")).unwrap();
    cb.metadata.created_unix = ca.metadata.created_unix;
    assert_eq!(ca.to_bytes(), cb.to_bytes());
    assert_eq!(
        std::fs::read(dir.path().join("a/loss_curve.csv")).unwrap(),
        std::fs::read(dir.path().join("b/loss_curve.csv")).unwrap()
    );
}

#[test]
fn errors_are_single_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "work", "learning_rat = 0.1\n");
    let out = acp(&cfg, &["prepare"]);
    let err = error_line(&out);
    assert_eq!(err["error"]["kind"], "config");
    assert_eq!(String::from_utf8_lossy(&out.stderr).lines().count(), 1);

    let cfg = write_config(dir.path(), "w2", "");
    let out = acp(&cfg, &["prepare"]);
    assert_eq!(error_line(&out)["error"]["kind"], "io");
    ok(acp(&cfg, &["synth", "--n", "5"]));
    let out = acp(&cfg, &["train"]);
    let err = error_line(&out);
    assert_eq!(err["error"]["kind"], "missing_artifact");
    assert!(err["error"]["message"].as_str().unwrap().contains("acp prepare"));
}
