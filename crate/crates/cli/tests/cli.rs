use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 3
[simulate]
channels_per_group = [14, 10, 10, 16]
n_topics = 3
[simulate.effects]
beta_time = 0.55
beta_group_time = [-0.44, -0.44, -0.44]
"#;

fn cohortlens(out: &Path, config: Option<&Path>, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cohortlens"));
    cmd.args(args).arg("--out").arg(out);
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    // keep the caller's environment from leaking into the configuration
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("COHORTLENS_")) {
        cmd.env_remove(k);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, CONFIG).unwrap();
    path
}

#[test]
fn missing_dependency_is_a_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = cohortlens(&out, None, &["fit-glmm"]);
    assert!(!o.status.success());
    let stderr = String::from_utf8_lossy(&o.stderr);
    let line = stderr.lines().find(|l| l.starts_with('{')).expect("json line on stderr");
    let v: serde_json::Value = serde_json::from_str(line).unwrap();
    assert_eq!(v["error"]["kind"], "dependency");
    assert!(v["error"]["message"].as_str().unwrap().contains("align"));
}

#[test]
fn simulate_then_run_produces_a_report_with_recovery() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("out");
    let o = cohortlens(&out, Some(&cfg), &["simulate"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = cohortlens(&out, Some(&cfg), &["run"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("report.md"), "{stdout}");
    let report = std::fs::read_to_string(out.join("report.md")).unwrap();
    assert!(report.contains("## Recovery of simulated effects"));
    assert!(out.join("plots/group_curves.csv").exists());
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        assert!(cohortlens(&out, Some(&cfg), &["simulate"]).status.success());
        assert!(cohortlens(&out, Some(&cfg), &["run"]).status.success());
        out
    };
    let (a, b) = (run("a"), run("b"));
    for name in ["report.md", "glmm_results.csv", "temporal_tests.csv", "matches.csv", "selection_report.json"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn show_config_honours_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let o = cohortlens(dir.path(), Some(&cfg), &["show-config", "--seed", "17"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let table: toml::Table = text.parse().unwrap_or_else(|_| panic!("not TOML:\n{text}"));
    assert_eq!(table["seed"].as_integer(), Some(17));
    assert_eq!(table["simulate"]["n_topics"].as_integer(), Some(3));
}

#[test]
fn bad_config_is_reported_as_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "no_such_key = 1\n").unwrap();
    let o = cohortlens(dir.path(), Some(&path), &["validate"]);
    assert!(!o.status.success());
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains(r#""kind":"config""#), "{stderr}");
}
