//! CLI behavior: exit codes, error formatting, and end-to-end command
//! flows over a small synthetic dataset.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_relmix")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin()).current_dir(dir).args(args).output().expect("binary runs")
}

#[test]
fn usage_errors_exit_1_with_prefix() {
    let out = run(&["fit", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error[1]:"), "{err}");
    assert_eq!(err.lines().count(), 1, "single-line machine-parseable error");

    let out = run(&["definitely-not-a-subcommand"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for subcommand in ["compile", "fit", "predict", "query", "cluster", "synth", "bench"] {
        assert!(text.contains(subcommand), "help missing {subcommand}");
    }
}

#[test]
fn data_errors_exit_2_with_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let schema = dir.path().join("s.sql");
    std::fs::write(&schema, "CREATE TABLE t (id INT PRIMARY KEY, a REAL;").unwrap();
    let out = run(&["compile", "--schema", schema.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error[2]:"), "{err}");
    assert!(err.contains("line"), "syntax errors report a position: {err}");

    // Missing file is also a data error.
    let out = run(&["compile", "--schema", "/nonexistent/s.sql"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn full_pipeline_over_synthetic_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = run(&[
        "synth", "--preset", "umr", "--users", "40", "--movies", "25", "--ratings", "300",
        "--seed", "1", "--mask", "0.2", "--out", data.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for file in
        ["users.csv", "movies.csv", "ratings.csv", "schema.sql", "config.json", "ground_truth.csv"]
    {
        assert!(data.join(file).exists(), "missing {file}");
    }

    // compile prints the structure report.
    let out = run_in(
        dir.path(),
        &[
            "compile", "--schema", "data/schema.sql", "--config", "data/config.json",
            "--data", "data",
        ],
    );
    assert!(out.status.success());
    let report = String::from_utf8_lossy(&out.stdout);
    assert!(report.contains("gate 12x5"), "{report}");

    // fit writes a posterior and logs the ELBO trace to stderr.
    let out = run_in(
        dir.path(),
        &[
            "fit", "--schema", "data/schema.sql", "--config", "data/config.json", "--data",
            "data", "--out", "post.json", "--sweeps", "20", "--seed", "2", "--init",
            "stratified",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = String::from_utf8_lossy(&out.stderr);
    assert!(log.contains("sweep   1: elbo"), "{log}");

    // predict emits one row per masked/missing cell.
    let out = run_in(dir.path(), &["predict", "--model", "post.json", "--data", "data"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8_lossy(&out.stdout);
    assert!(csv.starts_with("table,row,column,kind,payload\n"));
    assert!(csv.lines().count() > 10, "predictions present");

    // query over a new partial record.
    std::fs::write(
        dir.path().join("q.json"),
        r#"[{"table":"ratings","id":"r0","bindings":{"user_id":"1","movie_id":"2","score":null}}]"#,
    )
    .unwrap();
    let out = run_in(dir.path(), &["query", "--model", "post.json", "--query", "q.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8_lossy(&out.stdout);
    assert!(csv.contains("ratings,r0,score,real"), "{csv}");

    // cluster exports per-row assignments.
    let out = run_in(dir.path(), &["cluster", "--model", "post.json", "--table", "users"]);
    assert!(out.status.success());
    let csv = String::from_utf8_lossy(&out.stdout);
    assert_eq!(csv.lines().count(), 41, "header plus one row per user");

    // Unknown table is a data error with the standard prefix.
    let out = run_in(dir.path(), &["cluster", "--model", "post.json", "--table", "zz"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[2]:"));
}

#[test]
fn bench_h2h_writes_matrix_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("h2h.csv");
    let out = run(&[
        "bench", "h2h", "--players", "45", "--matches", "900", "--k", "3", "--seed", "1",
        "--out", out_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&out_path).unwrap();
    assert!(csv.starts_with("cluster_i,cluster_j,mean_result\n"));
    assert_eq!(csv.lines().count(), 10, "header plus 9 pairs");
    let log = String::from_utf8_lossy(&out.stderr);
    assert!(log.contains("agreement"), "{log}");
}
