//! End-to-end CLI tests: exit codes, run-directory layout, append-only
//! semantics, and byte-identical reruns.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::fixture;
use medeval::judge::stub::StubServer;
use medeval::judge::JudgeRubric;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_medeval"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("run medeval")
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

struct Setup {
    _tmp: tempfile::TempDir,
    config_path: PathBuf,
    run_dir: PathBuf,
}

/// Write a config pointing at a fixture corpus. `base_url` empty means the
/// judge section keeps its (invalid) default.
fn setup(corpus: &str, base_url: &str, extra: &str) -> Setup {
    let tmp = tempfile::tempdir().expect("tempdir");
    let out_dir = tmp.path().join("out");
    let judge = if base_url.is_empty() {
        String::new()
    } else {
        format!(
            "[judge]\nbase_url = \"{base_url}\"\napi_key_source = \"\"\nbackoff_base_ms = 1\ntimeout_ms = 5000\n"
        )
    };
    let config = format!(
        r#"run_id = "run-001"
[paths]
references = "{refs}"
candidates_baseline = "{base}"
candidates_treatment = "{treat}"
out_dir = "{out}"
{judge}
{extra}
"#,
        refs = fixture(&format!("{corpus}/references.json")).display(),
        base = fixture(&format!("{corpus}/baseline.jsonl")).display(),
        treat = fixture(&format!("{corpus}/finetuned.jsonl")).display(),
        out = out_dir.display(),
    );
    let config_path = tmp.path().join("config.toml");
    std::fs::write(&config_path, config).expect("write config");
    Setup {
        run_dir: out_dir.join("run-001"),
        _tmp: tmp,
        config_path,
    }
}

#[test]
fn help_lists_subcommands() {
    let out = run(&["--help"]);
    assert_eq!(exit_code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["ingest-check", "score", "judge", "report", "demo-adapter"] {
        assert!(text.contains(cmd), "missing {cmd} in help");
    }
}

#[test]
fn missing_config_exits_2() {
    let out = run(&["score", "--config", "/nonexistent/config.toml"]);
    assert_eq!(exit_code(&out), 2);
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn invalid_config_key_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    std::fs::write(&path, "surprise = true\n").unwrap();
    let out = run(&["score", "--config", path.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn missing_candidate_file_exits_2_with_path() {
    let setup = setup("golden", "", "");
    // break the baseline path
    let config = std::fs::read_to_string(&setup.config_path).unwrap();
    std::fs::write(
        &setup.config_path,
        config.replace("baseline.jsonl", "missing.jsonl"),
    )
    .unwrap();
    let out = run(&["score", "--config", setup.config_path.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.jsonl"));
}

#[test]
fn ingest_check_reports_84_of_120() {
    let setup = setup("corpus120", "", "");
    let out = run(&["ingest-check", "--config", setup.config_path.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 0);
    let report: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("ingest-check json");
    assert_eq!(report["pairs"], 84);
    assert_eq!(report["audit"]["records"], 120);
    assert_eq!(report["audit"]["kept"], 84);
    assert_eq!(report["audit"]["flagged"]["empty"], 36);
}

#[test]
fn over_aggressive_filter_exits_3() {
    let setup = setup("golden", "", "[filter]\nmin_tokens = 100000\n");
    let out = run(&["score", "--config", setup.config_path.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 3);
}

#[test]
fn score_writes_track_a_and_is_append_only() {
    let setup = setup("golden", "", "");
    let args = ["score", "--config", setup.config_path.to_str().unwrap()];
    let out = run(&args);
    assert_eq!(exit_code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let dir = setup.run_dir.join("track_a");
    for file in ["pair_scores.jsonl", "pair_scores.csv", "summary.json", "filter_audit.json"] {
        assert!(dir.join(file).exists(), "missing {file}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["pair_count"], 20);
    assert_eq!(summary["rows"].as_array().unwrap().len(), 5);
    // second run refuses to overwrite
    let again = run(&args);
    assert_eq!(exit_code(&again), 2);
    assert!(String::from_utf8_lossy(&again.stderr).contains("already exists"));
}

#[test]
fn score_metric_filter_restricts_rows() {
    let setup = setup("golden", "", "");
    let out = run(&[
        "score",
        "--config",
        setup.config_path.to_str().unwrap(),
        "--metrics",
        "bleu",
    ]);
    assert_eq!(exit_code(&out), 0);
    let summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(setup.run_dir.join("track_a/summary.json")).unwrap(),
    )
    .unwrap();
    let rows = summary["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["metric_name"], "bleu");
}

#[test]
fn judge_without_credential_exits_2() {
    let setup = setup(
        "golden",
        "",
        "[judge]\nbase_url = \"http://127.0.0.1:1\"\napi_key_source = \"MEDEVAL_TEST_UNSET_KEY\"\n",
    );
    let out = bin()
        .args(["judge", "--config", setup.config_path.to_str().unwrap()])
        .env_remove("MEDEVAL_TEST_UNSET_KEY")
        .output()
        .expect("run");
    assert_eq!(exit_code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("MEDEVAL_TEST_UNSET_KEY"));
}

#[test]
fn unreachable_endpoint_exits_4() {
    let setup = setup(
        "golden",
        "http://127.0.0.1:9",
        "[judge.retry]\n", // placeholder rejected below if used
    );
    // rewrite with zero retries to keep the test fast
    let config = std::fs::read_to_string(&setup.config_path)
        .unwrap()
        .replace("[judge.retry]\n", "")
        .replace("backoff_base_ms = 1", "backoff_base_ms = 1\nmax_retries = 0");
    std::fs::write(&setup.config_path, config).unwrap();
    let out = run(&["judge", "--config", setup.config_path.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 4);
}

#[test]
fn report_without_track_a_exits_3() {
    let setup = setup("golden", "", "");
    let out = run(&["report", "--config", setup.config_path.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 3);
}

#[test]
fn full_pipeline_writes_report_with_divergence() {
    let rubric = JudgeRubric::default();
    let server = StubServer::fixed_scores([3, 3, 3, 3], [3, 3, 2, 4], &rubric.dimension_names());
    let setup = setup("corpus120", server.base_url(), "");
    let cfg = setup.config_path.to_str().unwrap();
    assert_eq!(exit_code(&run(&["score", "--config", cfg])), 0);
    assert_eq!(exit_code(&run(&["judge", "--config", cfg])), 0);
    let out = run(&[
        "report",
        "--config",
        cfg,
        "--markdown",
        "--csv",
        "--printed",
        fixture("published/printed_improvements.json").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report_dir = setup.run_dir.join("report");
    for file in ["report.json", "report.md", "report.csv"] {
        assert!(report_dir.join(file).exists(), "missing {file}");
    }
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(report_dir.join("report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["track_a"]["pair_count"], 84);
    assert_eq!(report["track_b"]["verdict_count"], 20);
    assert!(report["divergence"]["classification"].is_string());
    assert_eq!(report["provenance"]["corpus_id"], "references.json");
    // the printed improvements disagree with this synthetic corpus, so every
    // attached row must carry the discrepancy flag
    let rows = report["track_a"]["rows"].as_array().unwrap();
    assert!(rows.iter().all(|r| r["printed_discrepancy"] == true));
    // audit log captured every judge attempt
    let audit = std::fs::read_to_string(setup.run_dir.join("logs/judge_audit.jsonl")).unwrap();
    assert_eq!(audit.lines().count(), 20);
}

fn collect_tree(root: &Path, skip: &str) -> BTreeMap<String, Vec<u8>> {
    fn walk(dir: &Path, root: &Path, skip: &str, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).expect("read_dir") {
            let path = entry.expect("entry").path();
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().to_string();
            if path.is_dir() {
                if rel != skip {
                    walk(&path, root, skip, out);
                }
            } else {
                out.insert(rel, std::fs::read(&path).expect("read file"));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, skip, &mut out);
    out
}

#[test]
fn identical_runs_produce_identical_trees() {
    let rubric = JudgeRubric::default();
    let server = StubServer::fixed_scores([4, 3, 4, 5], [2, 2, 3, 1], &rubric.dimension_names());
    let mut trees = Vec::new();
    for _ in 0..2 {
        let setup = setup("golden", server.base_url(), "");
        let cfg = setup.config_path.to_str().unwrap();
        assert_eq!(exit_code(&run(&["score", "--config", cfg])), 0);
        assert_eq!(exit_code(&run(&["judge", "--config", cfg])), 0);
        assert_eq!(
            exit_code(&run(&["report", "--config", cfg, "--markdown", "--csv"])),
            0
        );
        trees.push(collect_tree(&setup.run_dir, "logs"));
    }
    assert_eq!(trees[0].len(), trees[1].len());
    for (path, bytes) in &trees[0] {
        assert_eq!(
            Some(bytes),
            trees[1].get(path),
            "file {path} differs between identical runs"
        );
    }
}

#[test]
fn demo_adapter_reports_all_pass() {
    let out = run(&["demo-adapter", "--trials", "25", "--seed", "11"]);
    assert_eq!(exit_code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 7);
    assert!(!text.contains("FAIL"));
}

#[test]
fn demo_adapter_fixture_mismatch_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad_merge.json");
    std::fs::write(
        &path,
        serde_json::json!({
            "w0": {"rows": 2, "cols": 2, "entries": [1.0, 0.0, 0.0, 1.0]},
            "b": {"rows": 2, "cols": 1, "entries": [1.0, 1.0]},
            "a": {"rows": 1, "cols": 2, "entries": [1.0, 0.0]},
            "expected_merge": {"rows": 2, "cols": 2, "entries": [9.0, 9.0, 9.0, 9.0]}
        })
        .to_string(),
    )
    .unwrap();
    let out = run(&[
        "demo-adapter",
        "--trials",
        "5",
        "--fixture",
        path.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL merge_fixture"));
}
