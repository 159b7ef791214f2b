//! End-to-end checks of the command-line harness: each subcommand runs as
//! a real process, succeeds with exit code 0, produces byte-identical
//! files across reruns, and fails loudly on bad input.

use std::path::Path;
use std::process::{Command, Output};

use turncredit::env::{load_questions, KnowledgeBase};
use turncredit::episode::{write_trajectory_jsonl, TrajectoryRecord};
use turncredit::policy::{sample_trajectory, FeatureSpec, PolicyParams, RolloutOptions};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_turncredit"))
}

fn run_ok(args: &[&str]) -> Output {
    let output = bin().args(args).output().expect("spawn turncredit");
    assert!(
        output.status.success(),
        "command {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

fn read_bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

fn gen_env_into(dir: &Path) {
    run_ok(&[
        "gen-env",
        "--entities",
        "12",
        "--relations",
        "3",
        "--density",
        "0.5",
        "--seed",
        "5",
        "--hops",
        "2",
        "--questions",
        "2",
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
}

const TRAIN_CONFIG: &str = "g=2\ntotal_steps=3\nprime_scale=2\ncheckpoint_interval=2\nseed=5\n";

#[test]
fn gen_env_writes_deterministic_files() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen_env_into(&a);
    gen_env_into(&b);
    for name in ["kb.txt", "questions.jsonl"] {
        assert_eq!(
            read_bytes(&a.join(name)),
            read_bytes(&b.join(name)),
            "{name} differs between identical invocations"
        );
    }
    // The files load back as a consistent environment.
    let kb = KnowledgeBase::load(&a.join("kb.txt")).unwrap();
    let questions = load_questions(&a.join("questions.jsonl"), &kb).unwrap();
    assert_eq!(kb.num_entities(), 12);
    assert_eq!(questions.len(), 2);
    assert!(questions.iter().all(|q| q.relation_chain.len() == 2));
}

#[test]
fn train_then_eval_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let env_dir = tmp.path().join("env");
    gen_env_into(&env_dir);
    let config_path = tmp.path().join("train.cfg");
    std::fs::write(&config_path, TRAIN_CONFIG).unwrap();

    let train = |run_dir: &Path| {
        run_ok(&[
            "train",
            "--config",
            config_path.to_str().unwrap(),
            "--kb",
            env_dir.join("kb.txt").to_str().unwrap(),
            "--questions",
            env_dir.join("questions.jsonl").to_str().unwrap(),
            "--run-dir",
            run_dir.to_str().unwrap(),
        ])
    };
    let run_a = tmp.path().join("run_a");
    let run_b = tmp.path().join("run_b");
    let out = train(&run_a);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("stop: completed"), "stdout: {stdout}");
    assert!(run_a.join("metrics.csv").exists());
    assert!(run_a.join("config").exists());
    assert!(run_a.join("ref.policy").exists());
    assert!(run_a.join("ckpt_3.policy").exists());
    assert_eq!(
        std::fs::read_to_string(run_a.join("stop")).unwrap(),
        "completed\n"
    );

    train(&run_b);
    assert_eq!(
        read_bytes(&run_a.join("metrics.csv")),
        read_bytes(&run_b.join("metrics.csv")),
        "training is deterministic"
    );
    assert_eq!(
        read_bytes(&run_a.join("ckpt_3.policy")),
        read_bytes(&run_b.join("ckpt_3.policy"))
    );

    let report_path = tmp.path().join("report.json");
    let rollouts_path = tmp.path().join("eval_rollouts.jsonl");
    let out = run_ok(&[
        "eval",
        "--policy",
        run_a.join("ckpt_3.policy").to_str().unwrap(),
        "--kb",
        env_dir.join("kb.txt").to_str().unwrap(),
        "--questions",
        env_dir.join("questions.jsonl").to_str().unwrap(),
        "--seed",
        "3",
        "--out",
        report_path.to_str().unwrap(),
        "--rollouts",
        rollouts_path.to_str().unwrap(),
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let report: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(report["num_questions"], 2);
    let from_file: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report, from_file);

    // The dumped greedy rollouts are valid `score` input: one verdict per
    // trajectory, ids following the q<index> convention.
    let records = turncredit::episode::read_trajectory_jsonl(&rollouts_path).unwrap();
    assert_eq!(records.len(), 2);
    assert_eq!(records[0].question_id, "q0");
    let verdicts_path = tmp.path().join("eval_verdicts.jsonl");
    run_ok(&[
        "score",
        "--critic",
        "oracle",
        "--in",
        rollouts_path.to_str().unwrap(),
        "--kb",
        env_dir.join("kb.txt").to_str().unwrap(),
        "--questions",
        env_dir.join("questions.jsonl").to_str().unwrap(),
        "--out",
        verdicts_path.to_str().unwrap(),
    ]);
    let verdicts = turncredit::critic::read_verdicts_jsonl(&verdicts_path).unwrap();
    assert_eq!(verdicts.len(), 2, "one verdict record per eval question");
}

#[test]
fn score_and_agree_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let env_dir = tmp.path().join("env");
    gen_env_into(&env_dir);
    let kb = KnowledgeBase::load(&env_dir.join("kb.txt")).unwrap();
    let questions = load_questions(&env_dir.join("questions.jsonl"), &kb).unwrap();

    // Sampled rollouts, ids following the q<index> convention.
    let spec = FeatureSpec::new(kb.vocab(), 4).unwrap();
    let params = PolicyParams::format_primed(spec, 3.0).unwrap();
    let opts = RolloutOptions::default();
    let mut records = Vec::new();
    for (i, q) in questions.iter().enumerate() {
        for s in 0..3u64 {
            let traj = sample_trajectory(
                &params,
                q,
                &kb,
                &opts,
                100 + 10 * i as u64 + s,
                &format!("q{i}"),
            )
            .unwrap();
            records.push(TrajectoryRecord::from_trajectory(&traj, &kb).unwrap());
        }
    }
    let rollouts = tmp.path().join("rollouts.jsonl");
    write_trajectory_jsonl(&rollouts, &records).unwrap();

    let score = |critic: &str, out: &Path| {
        run_ok(&[
            "score",
            "--critic",
            critic,
            "--in",
            rollouts.to_str().unwrap(),
            "--kb",
            env_dir.join("kb.txt").to_str().unwrap(),
            "--questions",
            env_dir.join("questions.jsonl").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])
    };
    let oracle_a = tmp.path().join("oracle_a.jsonl");
    let oracle_b = tmp.path().join("oracle_b.jsonl");
    let outcome = tmp.path().join("outcome.jsonl");
    score("oracle", &oracle_a);
    score("oracle", &oracle_b);
    score("outcome", &outcome);
    assert_eq!(
        read_bytes(&oracle_a),
        read_bytes(&oracle_b),
        "scoring is deterministic"
    );
    let verdicts = turncredit::critic::read_verdicts_jsonl(&oracle_a).unwrap();
    assert_eq!(verdicts.len(), records.len(), "one verdict per trajectory");

    let out = run_ok(&[
        "agree",
        "--a",
        oracle_a.to_str().unwrap(),
        "--b",
        outcome.to_str().unwrap(),
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let agreement: f64 = stdout.trim().parse().expect("agree prints a number");
    assert!(
        (0.0..=1.0).contains(&agreement),
        "agreement {agreement} out of range"
    );
    // Self-agreement is exactly 1.
    let out = run_ok(&[
        "agree",
        "--a",
        oracle_a.to_str().unwrap(),
        "--b",
        oracle_b.to_str().unwrap(),
    ]);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "1");
}

#[test]
fn compare_emits_report_and_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let env_dir = tmp.path().join("env");
    gen_env_into(&env_dir);
    let cfg_a = tmp.path().join("a.cfg");
    let cfg_b = tmp.path().join("b.cfg");
    std::fs::write(&cfg_a, format!("{TRAIN_CONFIG}alpha=0.25\n")).unwrap();
    std::fs::write(&cfg_b, format!("{TRAIN_CONFIG}alpha=0\n")).unwrap();
    let out_dir = tmp.path().join("cmp");
    let out = run_ok(&[
        "compare",
        "--config-a",
        cfg_a.to_str().unwrap(),
        "--config-b",
        cfg_b.to_str().unwrap(),
        "--kb",
        env_dir.join("kb.txt").to_str().unwrap(),
        "--questions",
        env_dir.join("questions.jsonl").to_str().unwrap(),
        "--n-seeds",
        "3",
        "--threshold",
        "1.5",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        stdout.contains("median steps_to_threshold"),
        "stdout: {stdout}"
    );

    let csv = std::fs::read_to_string(out_dir.join("report.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("config,seed,steps_to_threshold,censored")
    );
    assert_eq!(lines.count(), 6, "two arms x three seeds");
    let svg = std::fs::read_to_string(out_dir.join("curves.svg")).unwrap();
    assert!(svg.starts_with("<svg "));
    assert_eq!(std::fs::read_dir(out_dir.join("runs")).unwrap().count(), 6);
}

#[test]
fn failures_exit_nonzero_with_diagnostics() {
    // Unknown subcommand: usage error.
    let out = bin().arg("frobnicate").output().unwrap();
    assert!(!out.status.success());

    // Missing input file: runtime error with a diagnostic line.
    let out = bin()
        .args([
            "train",
            "--config",
            "/nonexistent/config",
            "--kb",
            "/nonexistent/kb",
            "--questions",
            "/nonexistent/q",
            "--run-dir",
            "/tmp/never-created-run",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error:"), "stderr: {stderr}");

    // Invalid config contents: diagnostic names the offending key.
    let tmp = tempfile::tempdir().unwrap();
    let bad_cfg = tmp.path().join("bad.cfg");
    std::fs::write(&bad_cfg, "g=1\n").unwrap();
    let env_dir = tmp.path().join("env");
    gen_env_into(&env_dir);
    let out = bin()
        .args([
            "train",
            "--config",
            bad_cfg.to_str().unwrap(),
            "--kb",
            env_dir.join("kb.txt").to_str().unwrap(),
            "--questions",
            env_dir.join("questions.jsonl").to_str().unwrap(),
            "--run-dir",
            tmp.path().join("run").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("g must be >= 2"));

    // Help exits 0.
    let out = bin().arg("--help").output().unwrap();
    assert!(out.status.success());
}
