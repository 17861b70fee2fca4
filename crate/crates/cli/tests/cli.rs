use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let stage = json!({
        "model": {"base_filters": 2, "encoder_blocks": 3, "input_size": 32},
        "budget": {"max_epochs": 1},
        "validation_folds": 4
    });
    let cfg = json!({
        "target": {"cysts": 3, "hemangiomas": 3, "metastases": 3, "healthy": 3, "image_size": 32},
        "pretrain": {"cysts": 6, "hemangiomas": 6, "metastases": 6, "healthy": 6, "image_size": 32, "seed": 99},
        "seeds": [0],
        "crop": {"margin": 4, "crop_size": 32},
        "liver": stage,
        "lesion": stage,
        "finetune": {"budget": {"max_epochs": 1}},
        "output_dir": dir.join("run")
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cascade-tune"))
        .args(args)
        .env("CASCADE_TUNE_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["no-such-command"])), 1);
    assert_eq!(code(&run(&["finetune", "--fold", "0"])), 1);
}

#[test]
fn bad_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"folds": 3, "typo": true}"#).unwrap();
    let o = run(&["gen-data", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("typo"));
    let o = run(&["gen-data", "--config", dir.path().join("missing.json").to_str().unwrap()]);
    assert_ne!(code(&o), 0);
}

#[test]
fn end_to_end_commands() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("run");

    let o = run(&["gen-data", "--config", cfg]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("data/target/manifest.json").exists());
    assert_eq!(code(&run(&["gen-data", "--config", cfg])), 1);
    assert_eq!(code(&run(&["gen-data", "--config", cfg, "--force"])), 0);

    assert_eq!(code(&run(&["finetune", "--config", cfg, "--protocol", "hier_sideways", "--fold", "0"])), 1);
    assert_eq!(code(&run(&["finetune", "--config", cfg, "--protocol", "naive", "--fold", "7"])), 1);

    assert_eq!(code(&run(&["pretrain", "--config", cfg])), 0);
    assert!(out.join("pretrain/lesion").is_dir());

    let o = run(&["finetune", "--config", cfg, "--protocol", "hier_unfreeze", "--fold", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cell = out.join("cells/hier_unfreeze/fold1_seed0");
    let log = fs::read_to_string(cell.join("log.csv")).unwrap();
    let phases: std::collections::BTreeSet<&str> = log.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(phases.len(), 4);

    let o = run(&["evaluate", "--config", cfg, "--protocol", "hier_unfreeze", "--fold", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(cell.join("metrics_fold1.csv")).unwrap();
    assert!(csv.starts_with("protocol,fold,success,dice1,dice2,acc\n"));
    assert!(cell.join("predictions_fold1/summary.json").exists());
    assert_eq!(code(&run(&["evaluate", "--config", cfg, "--fold", "1"])), 1);

    let o = run(&["experiment", "--config", cfg, "--threads", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    let summary: Vec<&str> = report.lines().filter(|l| l.contains(",all,")).collect();
    assert_eq!(summary.len(), 5, "{report}");
    assert!(summary[0].starts_with("baseline,"));

    // a finished experiment reruns from the stored cells
    let o = run(&["experiment", "--config", cfg]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(out.join("report.csv")).unwrap(), report);
}
