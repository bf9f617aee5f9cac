//! End-to-end tests of the `fedcar` binary: artifact round trips, snapshot
//! reproducibility, exit-code classification, encoder call accounting, and a
//! full networked run driven entirely through the CLI.

use fedcar_core::config::RunConfig;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::process::{Command, Output, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_fedcar");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        stdout_of(out),
        stderr_of(out)
    );
}

fn gen_data(path: &Path) {
    let out = run(&[
        "gen-data",
        "--out",
        path.to_str().unwrap(),
        "--n-per-class",
        "30",
        "--classes",
        "2",
        "--dim",
        "8",
        "--spread",
        "0.5",
        "--seed",
        "41",
    ]);
    assert_ok(&out);
    assert!(stdout_of(&out).contains("60 samples"));
}

#[test]
fn help_lists_every_config_key() {
    let out = run(&["--help"]);
    assert_ok(&out);
    let help = stdout_of(&out);
    for line in RunConfig::KEY_HELP.lines() {
        let key = line.split_whitespace().next().unwrap();
        assert!(help.contains(key), "--help does not document config key `{key}`");
    }
    // the subcommands are listed too
    for sub in ["gen-data", "train", "serve-agg", "serve-client", "eval", "compare", "bound"] {
        assert!(help.contains(sub), "--help does not list subcommand `{sub}`");
    }
}

#[test]
fn gen_train_eval_bound_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("blobs.fchs");
    gen_data(&data);

    // federated training run
    let run1 = dir.path().join("run1");
    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run1.to_str().unwrap(),
        "--set",
        "clients=2",
        "--set",
        "rounds=3",
        "--set",
        "d_emb=8",
        "--set",
        "lr=0.05",
        "--set",
        "dropout=0",
    ]);
    assert_ok(&out);
    let summary = stdout_of(&out);
    assert!(summary.contains("final_val_accuracy ="), "summary missing accuracy:\n{summary}");
    for artifact in ["config.txt", "metrics.log", "model.bin", "summary.txt"] {
        assert!(run1.join(artifact).is_file(), "missing {artifact}");
    }
    let log = std::fs::read_to_string(run1.join("metrics.log")).unwrap();
    assert!(log.lines().any(|l| l.starts_with("type=client ")));
    assert!(log.lines().any(|l| l.starts_with("type=global ")));

    // scoring the run directory
    let out = run(&[
        "eval",
        "--run",
        run1.to_str().unwrap(),
        "--split",
        "val",
        "--k",
        "1,2",
    ]);
    assert_ok(&out);
    let eval_text = stdout_of(&out);
    assert!(eval_text.contains("hit@1 = "), "{eval_text}");
    assert!(eval_text.contains("hit@2 = "), "{eval_text}");

    // instrumented run producing a gradient trace, then its certification
    let run_t = dir.path().join("run-trace");
    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run_t.to_str().unwrap(),
        "--set",
        "instrument=true",
        "--set",
        "clients=2",
        "--set",
        "rounds=25",
        "--set",
        "d_emb=8",
        "--set",
        "lr=0.05",
        "--set",
        "dropout=0",
        "--set",
        "dp.mode=fixed",
        "--set",
        "dp.c0=1",
        "--set",
        "dp.sigma0=0.02",
    ]);
    assert_ok(&out);
    assert!(run_t.join("trace.bin").is_file());

    let out = run(&["bound", "--run", run_t.to_str().unwrap()]);
    assert_ok(&out);
    let report = stdout_of(&out);
    assert!(report.contains("PASS"), "bound report did not certify:\n{report}");
    assert!(run_t.join("theory.txt").is_file());
}

#[test]
fn separable_blobs_train_to_high_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("separable.fchs");
    let out = run(&[
        "gen-data",
        "--out",
        data.to_str().unwrap(),
        "--n-per-class",
        "30",
        "--classes",
        "2",
        "--dim",
        "8",
        "--spread",
        "0.1",
        "--seed",
        "41",
    ]);
    assert_ok(&out);

    let run_dir = dir.path().join("run");
    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
        "--set",
        "clients=1",
        "--set",
        "d_emb=8",
        "--set",
        "lr=0.1",
    ]);
    assert_ok(&out);

    let out = run(&[
        "eval",
        "--run",
        run_dir.to_str().unwrap(),
        "--split",
        "train",
        "--k",
        "1",
    ]);
    assert_ok(&out);
    let text = stdout_of(&out);
    let hit: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("hit@1 = "))
        .expect("eval prints hit@1")
        .trim()
        .parse()
        .unwrap();
    // the classes are far apart relative to their spread, so a trained
    // classifier must essentially solve the train split
    assert!(hit >= 0.95, "top-1 on separable blobs only {hit}");
}

#[test]
fn rerun_from_snapshot_is_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("blobs.fchs");
    gen_data(&data);

    let run1 = dir.path().join("first");
    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run1.to_str().unwrap(),
        "--set",
        "clients=2",
        "--set",
        "rounds=3",
        "--set",
        "d_emb=8",
        "--set",
        "dp.mode=adaptive",
    ]);
    assert_ok(&out);

    // replay purely from the snapshot; only the output directory moves
    let run2 = dir.path().join("second");
    let out = run(&[
        "train",
        "--config",
        run1.join("config.txt").to_str().unwrap(),
        "--out",
        run2.to_str().unwrap(),
    ]);
    assert_ok(&out);

    let m1 = std::fs::read(run1.join("model.bin")).unwrap();
    let m2 = std::fs::read(run2.join("model.bin")).unwrap();
    assert_eq!(m1, m2, "snapshot replay produced a different model");
    let log1 = std::fs::read_to_string(run1.join("metrics.log")).unwrap();
    let log2 = std::fs::read_to_string(run2.join("metrics.log")).unwrap();
    let strip_timing = |log: &str| -> Vec<String> {
        log.lines()
            .map(|l| {
                l.split_whitespace()
                    .filter(|f| !f.starts_with("wall_ms=") && !f.starts_with("distributed_ms="))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect()
    };
    assert_eq!(strip_timing(&log1), strip_timing(&log2));
}

#[test]
fn exit_codes_classify_failures() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("blobs.fchs");
    gen_data(&data);

    // configuration mistakes exit 2
    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--set",
        "learning_rate=0.1",
    ]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("unknown key"));

    // a missing dataset file exits 3
    let out = run(&["train", "--data", dir.path().join("absent.fchs").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr_of(&out));

    // a present but corrupt dataset file exits 4
    let bad = dir.path().join("corrupt.fchs");
    std::fs::write(&bad, b"this is not a dataset").unwrap();
    let out = run(&["train", "--data", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4), "stderr: {}", stderr_of(&out));
}

#[test]
fn precomputed_states_train_without_encoder_forwards() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("states.fchs");
    gen_data(&data);

    let run_dir = dir.path().join("run");
    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
        "--set",
        "encoder=precomputed",
        "--set",
        "mode=classifier-only",
        "--set",
        "clients=2",
        "--set",
        "rounds=3",
    ]);
    assert_ok(&out);
    let summary = std::fs::read_to_string(run_dir.join("summary.txt")).unwrap();
    assert!(
        summary.contains("encoder_forward_calls = 0"),
        "precomputed states must not run the encoder:\n{summary}"
    );
}

#[test]
fn networked_run_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("blobs.fchs");
    gen_data(&data);
    let agg_dir = dir.path().join("agg");

    let mut agg = Command::new(BIN)
        .args([
            "serve-agg",
            "--data",
            data.to_str().unwrap(),
            "--out",
            agg_dir.to_str().unwrap(),
            "--bind",
            "127.0.0.1:0",
            "--timeout-s",
            "30",
            "--set",
            "clients=2",
            "--set",
            "rounds=3",
            "--set",
            "d_emb=8",
        ])
        .stdout(Stdio::piped())
        .spawn()
        .expect("aggregator starts");

    // first stdout line announces the bound address
    let mut agg_stdout = BufReader::new(agg.stdout.take().unwrap());
    let mut line = String::new();
    agg_stdout.read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").unwrap_or_default().to_string();
    assert!(!addr.is_empty(), "no listen announcement, got: {line:?}");

    let clients: Vec<_> = (0..2)
        .map(|id| {
            Command::new(BIN)
                .args([
                    "serve-client",
                    "--client-id",
                    &id.to_string(),
                    "--connect",
                    &addr,
                    "--data",
                    data.to_str().unwrap(),
                    "--timeout-s",
                    "30",
                ])
                .stdout(Stdio::piped())
                .spawn()
                .expect("client starts")
        })
        .collect();

    for c in clients {
        let out = c.wait_with_output().unwrap();
        assert!(out.status.success(), "client failed: {}", stderr_of(&out));
        assert!(stdout_of(&out).contains("rounds_completed = 3"));
    }
    let status = agg.wait().unwrap();
    let mut rest = String::new();
    agg_stdout.read_to_string(&mut rest).unwrap();
    assert!(status.success(), "aggregator failed; stdout tail: {rest}");
    assert!(rest.contains("final_val_accuracy ="));
    assert!(agg_dir.join("model.bin").is_file());

    // the served run scores like any local run directory
    let out = run(&["eval", "--run", agg_dir.to_str().unwrap(), "--split", "val", "--k", "1"]);
    assert_ok(&out);
    assert!(stdout_of(&out).contains("hit@1 = "));
}
