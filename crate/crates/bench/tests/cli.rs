use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use precond_bench::config::TrainConfig;
use precond_bench::report::read_csv;
use precond_bench::throughput::GridConfig;
use precond_bench::train::MetricsRow;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn precond() -> Command {
    Command::new(env!("CARGO_BIN_EXE_precond"))
}

#[test]
fn shipped_configs_parse() {
    let mut seen = 0;
    for entry in fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.file_name().unwrap() == "throughput.conf" {
            GridConfig::load(&path).unwrap();
        } else {
            TrainConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        }
        seen += 1;
    }
    assert!(seen >= 4);
}

#[test]
fn train_writes_metrics_and_prints_summary() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("m.csv");
    let out = precond()
        .args(["train", "--config"])
        .arg(configs_dir().join("blobs_shampoo.conf"))
        .arg("--output")
        .arg(&csv)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("shampoo") && stdout.contains("test acc (%)"));
    let rows: Vec<MetricsRow> = read_csv(&csv).unwrap();
    assert_eq!(rows.len(), 5);
    assert!(rows.last().unwrap().test_accuracy > 0.9);
}

#[test]
fn bad_inputs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.conf");
    fs::write(&cfg, "maker = sgd\nbatch = 4\n").unwrap();
    let out = precond().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch"));

    let out = precond().args(["verify", "--mutation", "nonsense"]).output().unwrap();
    assert!(!out.status.success());
}
