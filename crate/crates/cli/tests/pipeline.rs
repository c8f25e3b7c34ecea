use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const FIXTURE_FILES: [&str; 4] = ["corpus.jsonl", "annotations.json", "scopes.json", "scores.jsonl"];

fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

/// Copies the shipped fixtures into `dir` with a config whose output
/// directory is `dir/out`.
fn setup(dir: &Path) -> PathBuf {
    for name in FIXTURE_FILES {
        fs::copy(fixtures_dir().join(name), dir.join(name)).unwrap();
    }
    let config = fs::read_to_string(fixtures_dir().join("mock.toml"))
        .unwrap()
        .replace("out_dir = \"../target/fixture-run\"", "out_dir = \"out\"");
    assert!(config.contains("out_dir = \"out\""));
    let path = dir.join("mock.toml");
    fs::write(&path, config).unwrap();
    path
}

fn run(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bounty-triage"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .unwrap()
}

fn run_ok(config: &Path, args: &[&str]) -> String {
    let out = run(config, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn error_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).expect("stderr is a JSON error object")
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                files.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    files
}

#[test]
fn mock_pipeline_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let config_a = setup(a.path());
    let config_b = setup(b.path());
    run_ok(&config_a, &["pipeline"]);
    // A different worker count must not change any artifact.
    run_ok(&config_b, &["--workers", "1", "pipeline"]);

    let first = tree(&a.path().join("out"));
    let second = tree(&b.path().join("out"));
    for name in ["metrics.csv", "metrics.rounded.csv", "pairs.csv", "fairness.csv", "runs/tax-rag.jsonl"] {
        assert!(first.contains_key(name), "missing {name}");
    }
    assert_eq!(first.keys().collect::<Vec<_>>(), second.keys().collect::<Vec<_>>());
    for (name, bytes) in &first {
        if name.starts_with("manifests/") {
            // Manifests embed the config hash, which covers the worker count.
            continue;
        }
        assert!(bytes == &second[name], "{name} differs between runs");
    }

    // Same config twice in the same place: manifests match too.
    let before = tree(&a.path().join("out"));
    run_ok(&config_a, &["pipeline"]);
    assert_eq!(before, tree(&a.path().join("out")));
}

#[test]
fn commands_leave_inputs_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    let before: Vec<Vec<u8>> = FIXTURE_FILES.iter().map(|f| fs::read(dir.path().join(f)).unwrap()).collect();
    run_ok(&config, &["pipeline"]);
    let after: Vec<Vec<u8>> = FIXTURE_FILES.iter().map(|f| fs::read(dir.path().join(f)).unwrap()).collect();
    assert_eq!(before, after);
}

#[test]
fn tax_rag_without_index_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    run_ok(&config, &["split"]);
    let out = run(&config, &["classify", "--setting", "tax-rag"]);
    assert_eq!(out.status.code(), Some(3));
    let err = error_json(&out);
    assert_eq!(err["error"]["kind"], "stage_dependency");
    assert!(err["error"]["missing"].as_str().unwrap().ends_with("kb.index.json"));
    assert_eq!(err["error"]["producer"], "index --target kb");
    assert!(!dir.path().join("out/runs/tax-rag.jsonl").exists());
}

#[test]
fn classify_before_split_names_the_split_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    let out = run(&config, &["classify", "--setting", "baseline"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(error_json(&out)["error"]["missing"].as_str().unwrap().ends_with("split.json"));
}

#[test]
fn evaluate_skips_unparsed_records() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    run_ok(&config, &["split"]);
    run_ok(&config, &["classify", "--setting", "baseline"]);
    let log = dir.path().join("out/runs/baseline.jsonl");
    let mut lines: Vec<Value> = fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let total = lines.len();
    assert!(total >= 2);
    lines[0]["predicted"] = Value::from("unparsed");
    lines[0]["raw_output"] = Value::from("I cannot decide.");
    let edited = dir.path().join("edited.jsonl");
    let text: String = lines.iter().map(|v| format!("{v}\n")).collect();
    fs::write(&edited, text).unwrap();

    let stdout = run_ok(&config, &["evaluate", "--run", edited.to_str().unwrap()]);
    let row = stdout.lines().nth(1).unwrap();
    let fields: Vec<&str> = row.split(',').collect();
    assert_eq!(fields[10], (total - 1).to_string(), "n counts parsed records only");
    assert_eq!(fields[11], "1", "n_unparsed");
}

#[test]
fn evaluate_without_runs_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    let out = run(&config, &["evaluate"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_json(&out)["error"]["producer"], "classify");
}

#[test]
fn stale_split_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    run_ok(&config, &["split"]);
    let out = run(&config, &["--seed", "7", "classify"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(error_json(&out)["error"]["message"].as_str().unwrap().contains("rerun split"));
}

#[test]
fn bad_config_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("broken.toml");
    fs::write(&config, "corpus = \"c.jsonl\"\nout_dir = \"out\"\n[retrieval]\nk = 0\nthreshold = 0.8\n").unwrap();
    let out = run(&config, &["ingest"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["kind"], "config");

    let missing = run(&dir.path().join("absent.toml"), &["ingest"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn ingest_reports_skipped_lines() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    let stdout = run_ok(&config, &["ingest"]);
    assert!(stdout.contains("skipped 1 malformed line"));
    let artifact: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/ingest.json")).unwrap()).unwrap();
    assert_eq!(artifact["skipped"][0]["line"], 21);
    assert_eq!(artifact["summary"]["total"], 20);
}

#[test]
fn whole_corpus_scope_writes_a_separate_log() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    run_ok(&config, &["split"]);
    run_ok(&config, &["classify", "--setting", "baseline"]);
    run_ok(&config, &["classify", "--setting", "baseline", "--scope", "all"]);
    let read = |name: &str| -> Vec<Value> {
        fs::read_to_string(dir.path().join("out/runs").join(name))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    };
    let test = read("baseline.jsonl");
    let all = read("baseline.all.jsonl");
    assert!(all.len() > test.len());
    assert!(test.iter().all(|r| r.get("scope").is_none()));
    assert!(all.iter().all(|r| r["scope"] == "all"));

    let stdout = run_ok(&config, &["evaluate"]);
    let settings: Vec<&str> = stdout
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(settings, ["baseline", "baseline:all"]);
}

#[test]
fn repeated_trials_are_logged_and_pooled() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    let text = fs::read_to_string(&config).unwrap().replace("trials = 1\n", "trials = 3\n");
    fs::write(&config, text).unwrap();
    run_ok(&config, &["split"]);
    run_ok(&config, &["classify", "--setting", "baseline"]);
    let records: Vec<Value> = fs::read_to_string(dir.path().join("out/runs/baseline.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let per_trial = records.len() / 3;
    assert_eq!(records.len(), per_trial * 3);
    for (i, record) in records.iter().enumerate() {
        let trial = record.get("trial").and_then(Value::as_u64).unwrap_or(0);
        assert_eq!(trial as usize, i / per_trial);
    }
    let stdout = run_ok(&config, &["evaluate"]);
    let n: usize = stdout.lines().nth(1).unwrap().split(',').nth(10).unwrap().parse().unwrap();
    assert_eq!(n, records.len());
    let manifest = fs::read_to_string(dir.path().join("out/manifests/evaluate.json")).unwrap();
    assert!(manifest.contains("every trial counts as one prediction"));
}
