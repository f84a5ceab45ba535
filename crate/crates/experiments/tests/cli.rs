use std::path::{Path, PathBuf};
use std::process::Command;

fn pdmp() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pdmp"))
}

fn write_config(dir: &Path, extra_study: &str) -> PathBuf {
    let path = dir.join("cfg.toml");
    std::fs::write(
        &path,
        format!(
            r#"schema_version = 1

[model]
nodes = 16
ladder = [{{ compartments = 2, channels = 5 }}, {{ compartments = 4, channels = 20 }}]
kinetics = {{ type = "two-state" }}
initial = {{ occupation = [1.0, 0.0] }}

[study]
kind = "lln"
t_end = 0.3
replicates = 6
basis = {{ modes = 2 }}
cadence = 0.05
{extra_study}

[execution]
seed = 5
"#
        ),
    )
    .unwrap();
    path
}

#[test]
fn validate_config_reports_errors_with_exit_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let ok = pdmp().args(["validate-config"]).arg(&cfg).output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("config hash"));
    let bad = write_config(dir.path(), "bogus = 1");
    let out = pdmp().args(["validate-config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn study_exit_codes_follow_the_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "lln_tolerance = 0.5");
    let out_dir = dir.path().join("pass");
    let ok = pdmp().args(["study", "lln"]).arg(&cfg).arg("--out").arg(&out_dir).output().unwrap();
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stdout));
    for f in ["report.json", "metrics.csv", "lln_error.svg", "timing.json"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let strict = write_config(dir.path(), "lln_tolerance = 1e-9");
    let fail = pdmp().args(["study", "lln"]).arg(&strict).arg("--out").arg(dir.path().join("fail")).output().unwrap();
    assert_eq!(fail.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&fail.stdout).contains("FAIL l2_error_final_below_tolerance"));
}

#[test]
fn same_seed_gives_identical_files_and_workers_do_not_matter() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "lln_tolerance = 0.5");
    let run = |name: &str, workers: &str| {
        let out = dir.path().join(name);
        let st = pdmp().args(["--workers", workers, "study", "lln"]).arg(&cfg).arg("--out").arg(&out).status().unwrap();
        assert!(st.success());
        (std::fs::read(out.join("metrics.csv")).unwrap(), std::fs::read(out.join("report.json")).unwrap())
    };
    let a = run("a", "1");
    assert_eq!(a, run("b", "1"));
    assert_eq!(a, run("c", "4"));
}

#[test]
fn trajectory_commands_write_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("traj");
    for cmd in ["simulate", "limit", "langevin"] {
        let st = pdmp().arg(cmd).arg(&cfg).arg("--out").arg(&out).status().unwrap();
        assert!(st.success(), "{cmd}");
    }
    let first = |name: &str| -> serde_json::Value {
        let text = std::fs::read_to_string(out.join(name)).unwrap();
        serde_json::from_str(text.lines().next().unwrap()).unwrap()
    };
    let lines = |name: &str| std::fs::read_to_string(out.join(name)).unwrap();
    for (file, kind) in [("path.jsonl", "snapshot"), ("limit.jsonl", "deterministic"), ("langevin.jsonl", "langevin")] {
        assert_eq!(first(file)["kind"], "header", "{file}");
        assert_eq!(first(file)["seed"], 5);
        assert!(lines(file).contains(&format!("\"kind\":\"{kind}\"")), "{file}");
    }
    assert!(lines("path.jsonl").contains("\"kind\":\"jump\""));
    // seed override changes the path
    let other = dir.path().join("other");
    pdmp().args(["--seed", "6", "simulate"]).arg(&cfg).arg("--out").arg(&other).status().unwrap();
    assert_ne!(std::fs::read(other.join("path.jsonl")).unwrap(), std::fs::read(out.join("path.jsonl")).unwrap());
}
