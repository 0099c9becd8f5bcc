use std::fs;
use std::path::Path;
use std::process::Command;

fn ddlab() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ddlab"));
    cmd.env("RUST_LOG", "warn");
    cmd
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

const SMALL: &str = r#"
experiment = "signalless"
n = 40
d = 80
steps = 8
replications = 3
seed = 5
"#;

#[test]
fn check_passes() {
    let out = ddlab().arg("check").output().unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("gradcheck"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn config_error_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = ddlab()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--set", "n=0", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n:"));

    let cfg = write_config(dir.path(), "experiment = \"signalless\"\nbogus = 1\n");
    let out = ddlab().args(["se", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn run_then_compare() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = ddlab()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--set", "engine.n_samples=2000", "--workers", "1", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let run_dir = std::path::PathBuf::from(String::from_utf8_lossy(&out.stdout).trim());
    assert!(run_dir.join("manifest.toml").is_file());
    assert!(run_dir.join("summary.json").is_file());
    for k in 0..3 {
        assert!(run_dir.join(format!("main/seed-{k}.csv")).is_file());
        assert!(run_dir.join(format!("main-gd/seed-{k}.csv")).is_file());
    }
    let se = run_dir.join("main/se.csv");
    assert!(se.is_file());

    let out = ddlab()
        .args(["compare", "--emp"])
        .arg(run_dir.join("summary.json"))
        .arg("--se")
        .arg(&se)
        .args(["--variant", "main"])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["steps"].as_array().unwrap().len(), 8);

    let out = ddlab()
        .args(["compare", "--emp"])
        .arg(run_dir.join("summary.json"))
        .arg("--se")
        .arg(&se)
        .args(["--variant", "nope"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn se_prints_table_to_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = ddlab()
        .args(["se", "--config"])
        .arg(&cfg)
        .args(["--set", "engine.n_samples=2000"])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8_lossy(&out.stdout);
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("t,"));
    assert_eq!(lines.count(), 8);
}
