//! End-to-end checks of the srdo binary: exit codes, emitted files, the
//! seed-override environment variable, and the scenario sweep.

use std::fs;
use std::path::Path;
use std::process::Command;

fn srdo() -> Command {
    Command::new(env!("CARGO_BIN_EXE_srdo"))
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path
}

fn tiny_config(out: &Path) -> String {
    format!(
        r#"
[problem]
m = 30
n = 4
partitions = 3
workers_per_partition = 2

[coding]
s = 1

[schedule]
a = 100.0
theta = 1.0

[control]
max_iters = 20
seeds = [1, 2]
output_dir = "{}"
"#,
        out.display()
    )
}

#[test]
fn run_emits_traces_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config(dir.path()));
    let out = srdo().arg("run").arg(&cfg).output().unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in ["trace_1.csv", "trace_2.csv", "summary.csv"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("seed 1:"));
    assert!(stdout.contains("seed 2:"));
}

#[test]
fn seed_override_replaces_configured_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config(dir.path()));
    let out = srdo()
        .arg("run")
        .arg(&cfg)
        .env("SRDO_SEED_OVERRIDE", "7,9")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.path().join("trace_7.csv").exists());
    assert!(dir.path().join("trace_9.csv").exists());
    assert!(!dir.path().join("trace_1.csv").exists());
}

#[test]
fn config_error_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[problem]\nm = 20\nn = 4\n[schedule]\ntheta = 2.0\n",
    );
    let out = srdo().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("theta"));
}

#[test]
fn divergence_exits_3_and_writes_partial_trace() {
    let dir = tempfile::tempdir().unwrap();
    // A near-constant large step on an ill-scaled instance blows up fast.
    let body = format!(
        r#"
[problem]
m = 40
n = 10
partitions = 2
workers_per_partition = 2

[schedule]
a = 1.0
theta = 0.01

[control]
max_iters = 5000
seeds = [1]
output_dir = "{}"
"#,
        dir.path().display()
    );
    let cfg = write_config(dir.path(), &body);
    let out = srdo().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    let trace = fs::read_to_string(dir.path().join("trace_1.csv")).unwrap();
    assert!(trace.lines().last().unwrap().starts_with("status,diverged"));
}

#[test]
fn verify_passes_clean_and_fails_corrupted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config(dir.path()));
    let ok = srdo().arg("verify").arg(&cfg).output().unwrap();
    assert!(
        ok.status.success(),
        "{}",
        String::from_utf8_lossy(&ok.stderr)
    );
    assert!(String::from_utf8_lossy(&ok.stdout).contains("verification passed"));

    let bad = srdo()
        .arg("verify")
        .arg(&cfg)
        .arg("--corrupt-scheme")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("FAIL"));
}

#[test]
fn scheme_subcommand_prints_matrices() {
    let out = srdo()
        .args(["scheme", "--n", "3", "--s", "1", "--seed", "7"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("# B 3x3"));
    assert!(text.contains("# A 3x3"));
    assert!(text.contains("max |AB - 1|"));
}

#[test]
fn scenario_sweep_writes_ordering_report() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!(
        r#"
[problem]
m = 36
n = 4
partitions = 3
workers_per_partition = 3

[coding]
s = 1
seed = 4

[topology]
fixed_assignment = [0, 1, 2]

[stragglers]
scenario = 1
t_window = 10
h_max = 5
straggle_prob = 0.4

[schedule]
a = 2000.0
theta = 1.0

[control]
max_iters = 50
seeds = [1, 2]
output_dir = "{}"
"#,
        dir.path().display()
    );
    let cfg = write_config(dir.path(), &body);
    let out = srdo()
        .arg("run")
        .arg(&cfg)
        .arg("--sweep-scenarios")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = fs::read_to_string(dir.path().join("ordering.csv")).unwrap();
    assert!(report.starts_with("seed,ae_scenario1,ae_scenario2,ae_scenario3"));
    assert!(report.contains("ordering_ae1_le_ae3_le_ae2"));
    for sc in 1..=3 {
        assert!(dir.path().join(format!("trace_s{sc}_1.csv")).exists());
    }
}
