//! End-to-end checks of the command-line surface.

use std::fs;
use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fediptw"))
}

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("fediptw-cli-tests").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn tiny_config(dir: &std::path::Path, method: &str) -> PathBuf {
    let text = format!(
        r#"
seed = 11
method = "{method}"
out_dir = "{}"
jobs = 2

[dataset]
kind = "synthetic"
n_replications = 2

[dataset.synthetic]
n_clients = 3
n_per_client = 60
d_x = 4
seed = 11

[federation]
rounds = 3
learning_rate = 0.02

[propensity]
hidden = 8

[factual]
hidden = 8

[protocol]
n_repeats = 1
rotations_per_repeat = 1

[if_pehe]
enabled = false
"#,
        dir.join("run").display()
    );
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn generate_run_report_diagnose_happy_path() {
    let dir = tmp_dir("happy");
    let config = tiny_config(&dir, "fed-iptw");

    let out = bin()
        .args(["generate", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let listed = String::from_utf8_lossy(&out.stdout);
    assert_eq!(listed.lines().count(), 2, "{listed}");
    assert!(listed.lines().all(|l| PathBuf::from(l).exists()));

    let out = bin().args(["run", "--config"]).arg(&config).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("method=fed-iptw"));
    assert!(stdout.contains("rpehe:"));
    let run_dir = dir.join("run");
    assert!(run_dir.join("metrics.csv").exists());
    assert!(run_dir.join("manifest.json").exists());

    let out = bin().arg("report").arg(&run_dir).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("rpehe:"));

    let table_path = dir.join("covariance_table.csv");
    let out = bin()
        .arg("diagnose")
        .arg(&run_dir)
        .args(["--out"])
        .arg(&table_path)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("method,cov_local_mean"));
    assert!(table_path.exists());
}

#[test]
fn method_flag_overrides_config() {
    let dir = tmp_dir("override");
    let config = tiny_config(&dir, "fed-iptw");
    let out = bin()
        .args(["run", "--config"])
        .arg(&config)
        .args(["--method", "iptw-g", "--out"])
        .arg(dir.join("override-run"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("method=iptw-g"));
}

#[test]
fn unknown_method_fails_with_stage_tag() {
    let dir = tmp_dir("bad-method");
    let config = tiny_config(&dir, "fed-iptw");
    let out = bin()
        .args(["run", "--config"])
        .arg(&config)
        .args(["--method", "nonsense"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("stage config"), "{stderr}");
    assert!(stderr.contains("nonsense"), "{stderr}");
}

#[test]
fn missing_config_file_fails_cleanly() {
    let out = bin()
        .args(["run", "--config", "/nonexistent/config.toml"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage config"));
}

#[test]
fn diagnose_requires_run_dirs() {
    let out = bin().arg("diagnose").output().unwrap();
    assert!(!out.status.success());
}
