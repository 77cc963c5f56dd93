use std::collections::BTreeMap;
use std::path::Path;

use cohortlens::pipeline::{Pipeline, PipelineError, RunConfig, Stage, StageDeps};

const CONFIG: &str = r#"
seed = 21
[simulate]
channels_per_group = [14, 10, 10, 16]
n_topics = 3
[simulate.effects]
beta_time = 0.5
beta_group_time = [-0.4, -0.4, -0.4]
"#;

fn config(overrides: &[(&str, &str)]) -> RunConfig {
    let o: Vec<(String, String)> = overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    RunConfig::from_toml_with_overrides(CONFIG, &o).unwrap()
}

fn files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn full_run(cfg: RunConfig) -> (tempfile::TempDir, BTreeMap<String, Vec<u8>>) {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(cfg, dir.path(), StageDeps::Strict);
    p.run(Stage::Simulate).unwrap();
    let markers = p.run_all().unwrap();
    assert_eq!(markers.len(), 9);
    let f = files(dir.path());
    (dir, f)
}

#[test]
fn parallel_stages_do_not_change_outputs() {
    let (_a, serial) = full_run(config(&[]));
    let (_b, parallel) = full_run(config(&[("max_parallel", "4")]));
    assert_eq!(serial.keys().collect::<Vec<_>>(), parallel.keys().collect::<Vec<_>>());
    for (k, v) in &serial {
        assert!(parallel[k] == *v, "{k} differs");
    }
    for expected in ["report.md", "glmm_results.csv", "temporal_tests.csv", "matches.csv", "robustness_report.json"] {
        assert!(serial.contains_key(expected), "missing {expected}");
    }
}

#[test]
fn outputs_carry_no_absolute_paths() {
    let (dir, outputs) = full_run(config(&[]));
    let root = dir.path().to_string_lossy().into_owned();
    for (name, bytes) in &outputs {
        let text = String::from_utf8_lossy(bytes);
        assert!(!text.contains(&root), "{name} mentions the output directory");
    }
}

#[test]
fn strict_mode_names_the_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(config(&[]), dir.path(), StageDeps::Strict);
    p.run(Stage::Simulate).unwrap();
    match p.run(Stage::TemporalTest) {
        Err(e @ PipelineError::MissingDependency { .. }) => {
            assert_eq!(e.kind(), "dependency");
            assert!(e.to_string().contains("align"), "{e}");
        }
        other => panic!("expected a dependency error, got {other:?}"),
    }
    p.run(Stage::Validate).unwrap();
    p.run(Stage::Filter).unwrap();
    assert!(p.is_complete(Stage::Filter));
    assert!(!p.is_complete(Stage::Align));
}

#[test]
fn recovery_section_reflects_injected_effects() {
    let (_dir, outputs) = full_run(config(&[]));
    let report = String::from_utf8(outputs["report.md"].clone()).unwrap();
    assert!(report.contains("## Recovery of simulated effects"));
    assert!(report.contains("## Mixed-model effects"));
    let truth: serde_json::Value = serde_json::from_slice(&outputs["ground_truth.json"]).unwrap();
    assert_eq!(truth["spec"]["seed"], 21);
}

#[test]
fn seed_override_changes_the_data() {
    let (_a, a) = full_run(config(&[]));
    let (_b, b) = full_run(config(&[("seed", "22")]));
    assert_ne!(a["glmm_results.csv"], b["glmm_results.csv"]);
}
