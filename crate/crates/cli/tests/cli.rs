use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pppo_probe::mock::{MockConfig, MockModel, MockServer};

fn pppo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pppo")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = "steps = 4\nbatch_size = 2\nval_every = 2\nval_k = 2\nfinal_eval_k = 2\nhash_bits = 10\nbackbone_corpus = 300\nbackbone_epochs = 1\n";

/// Generates 30 tasks and trains a few steps; returns (tasks, run dir).
fn small_run(root: &Path) -> (PathBuf, PathBuf) {
    let config = root.join("small.kv");
    std::fs::write(&config, SMALL).unwrap();
    let data = root.join("data");
    let run = root.join("run");
    assert_eq!(code(&pppo(&["--out-dir", s(&data), "gen-tasks", "--count", "30"])), 0);
    let tasks = data.join("tasks.jsonl");
    let out = pppo(&[
        "--config",
        s(&config),
        "--out-dir",
        s(&run),
        "train",
        "--tasks",
        s(&tasks),
        "--vocab",
        s(&data.join("vocab.json")),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    (tasks, run)
}

#[test]
fn gen_tasks_writes_jsonl_and_vocab() {
    let dir = tempfile::tempdir().unwrap();
    let out = pppo(&["--seed", "4", "--out-dir", s(dir.path()), "gen-tasks", "--count", "12", "--difficulty", "1-2"]);
    assert_eq!(code(&out), 0);
    let text = std::fs::read_to_string(dir.path().join("tasks.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 12);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["id", "prompt", "answer", "difficulty"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    assert!(dir.path().join("vocab.json").exists());
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.kv");
    std::fs::write(&bad, "no_such_key = 3\n").unwrap();
    assert_eq!(code(&pppo(&["--config", s(&bad), "--out-dir", s(dir.path()), "train"])), 1);
    assert_eq!(code(&pppo(&["--out-dir", s(dir.path()), "train", "--set", "eps_low=1.5"])), 1);
    assert_eq!(code(&pppo(&["--out-dir", s(dir.path()), "gen-tasks", "--family", "poetry"])), 1);
    assert_eq!(code(&pppo(&["--out-dir", s(dir.path()), "report"])), 1);
}

#[test]
fn divergence_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("small.kv");
    std::fs::write(&config, SMALL).unwrap();
    let out = pppo(&["--config", s(&config), "--out-dir", s(dir.path()), "train", "--set", "backbone_lr=1e308"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
    assert!(!dir.path().join("summary.json").exists());
}

#[test]
fn train_probe_sweep_report() {
    let dir = tempfile::tempdir().unwrap();
    let (tasks, run) = small_run(dir.path());
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["steps_run"], 4);
    assert!(run.join("policy.bin").exists() && run.join("policy.json").exists());

    let ckpt = run.join("policy.bin");
    let probe_dir = dir.path().join("probe");
    let out = pppo(&[
        "--out-dir",
        s(&probe_dir),
        "probe",
        "--checkpoint",
        s(&ckpt),
        "--tasks",
        s(&tasks),
        "--n-correct",
        "1",
        "--n-incorrect",
        "1",
        "--g",
        "2",
        "--skip-shortfall",
        "--intervention",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(probe_dir.join("probe.json")).unwrap()).unwrap();
    assert!(report["probe"]["records"].is_array());
    assert!(report["intervention"]["with"].is_array());

    let out = pppo(&[
        "--out-dir",
        s(&probe_dir),
        "sweep",
        "--checkpoint",
        s(&ckpt),
        "--tasks",
        s(&tasks),
        "--n-correct",
        "1",
        "--n-incorrect",
        "1",
        "--g",
        "2",
        "--skip-shortfall",
        "--etas",
        "0.1,0.3,0.5",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let sweep: serde_json::Value =
        serde_json::from_slice(&std::fs::read(probe_dir.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(sweep["gap"].as_array().unwrap().len(), 3);

    let out = pppo(&["--out-dir", s(&probe_dir), "report", "--run", s(&run), "--aai", "12.36", "--pot", "26.17"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(probe_dir.join("report.json")).unwrap()).unwrap();
    let le = report["runs"][0]["effectiveness"]["le"].as_f64().unwrap();
    let pot = report["runs"][0]["effectiveness"]["pot"].as_f64().unwrap();
    let aai = report["runs"][0]["effectiveness"]["aai"].as_f64().unwrap();
    assert!((le * pot - 100.0 * aai).abs() < 1e-9);
    assert!((report["given"]["le"].as_f64().unwrap() - 12.36 / 26.17 * 100.0).abs() < 1e-12);
}

#[test]
fn probe_shortfall_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let (tasks, run) = small_run(dir.path());
    let out = pppo(&[
        "--out-dir",
        s(dir.path()),
        "probe",
        "--checkpoint",
        s(&run.join("policy.bin")),
        "--tasks",
        s(&tasks),
        "--attempts",
        "1",
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn dump_rollouts_lines() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("small.kv");
    std::fs::write(&config, SMALL).unwrap();
    let out = pppo(&["--config", s(&config), "--out-dir", s(dir.path()), "train", "--steps", "1", "--dump-rollouts"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("rollouts.jsonl")).unwrap();
    // batch 2 × n 8 groups.
    assert_eq!(text.lines().count(), 16);
    let line: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(line["continuation_lengths"].as_array().unwrap().len(), 8);
    assert!(line["reward"].as_u64().unwrap() <= 9);
}

#[tokio::test(flavor = "multi_thread")]
async fn probe_remote_against_the_mock() {
    let server = MockServer::start(MockConfig {
        model: MockModel::Arithmetic { accuracy: 0.5, lock_in: 0.9 },
        ..MockConfig::default()
    })
    .await
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let endpoint = dir.path().join("endpoint.json");
    std::fs::write(
        &endpoint,
        format!(r#"{{"base_url": "{}", "model": "mock", "api_key_env": null}}"#, server.base_url()),
    )
    .unwrap();
    let problems = dir.path().join("problems.jsonl");
    let lines: String =
        (0..4).map(|i| format!("{{\"question\": \"Compute {} + 2.\", \"answer\": \"{}\"}}\n", i + 1, i + 3)).collect();
    std::fs::write(&problems, lines).unwrap();
    let report = dir.path().join("remote.json");
    let args: Vec<String> = [
        "probe-remote",
        "--endpoint-config",
        s(&endpoint),
        "--problems",
        s(&problems),
        "--eta",
        "0.15",
        "--g",
        "3",
        "--n-correct",
        "1",
        "--n-incorrect",
        "1",
        "--out",
        s(&report),
    ]
    .map(String::from)
    .to_vec();
    let out =
        tokio::task::spawn_blocking(move || Command::new(env!("CARGO_BIN_EXE_pppo")).args(&args).output().unwrap())
            .await
            .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["problems_used"], 4);
    assert_eq!(r["correct_prefix"]["prefixes"], 4);
    server.shutdown().await;
}
