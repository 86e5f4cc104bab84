//! End-to-end tests of the command-line surface: exit codes, file outputs,
//! and schema stability.

use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gains"))
}

fn tmp(name: &str) -> PathBuf {
    let mut p = std::env::temp_dir();
    p.push(format!("gains-cli-test-{}-{name}", std::process::id()));
    p
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Writes a deterministic test model and a matching input row whose
/// concrete prediction is returned.
fn setup_model(seed: u64) -> (PathBuf, PathBuf, usize) {
    let model_path = tmp(&format!("model-{seed}.json"));
    let out = run(&[
        "gen",
        "model",
        "--dims",
        "3,4,2",
        "--seed",
        &seed.to_string(),
        "--out",
        model_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "gen model failed");

    let input_path = tmp(&format!("input-{seed}.csv"));
    std::fs::write(&input_path, "0.1,0.2,-0.1\n").unwrap();

    let model = gains_core::model::load_model(&model_path).unwrap();
    let y = model
        .forward(&gains_core::math::Vector(vec![0.1, 0.2, -0.1]))
        .unwrap();
    let argmax = y
        .0
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap();
    (model_path, input_path, argmax)
}

#[test]
fn verify_zero_epsilon_exits_verified() {
    let (model, input, argmax) = setup_model(11);
    let out = run(&[
        "verify",
        "--model",
        model.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--epsilon",
        "0",
        "--spec",
        &format!("cls:{argmax}"),
        "--method",
        "gains",
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("verified"));
}

#[test]
fn verify_wrong_target_with_samples_falsifies() {
    let (model, input, argmax) = setup_model(12);
    let wrong = 1 - argmax; // two-logit model
    let out = run(&[
        "verify",
        "--model",
        model.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--epsilon",
        "0",
        "--spec",
        &format!("cls:{wrong}"),
        "--samples",
        "8",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stdout(&out).contains("falsified"));
}

#[test]
fn missing_model_is_a_usage_error() {
    let (_, input, _) = setup_model(13);
    let out = run(&[
        "verify",
        "--model",
        "/nonexistent/model.json",
        "--input",
        input.to_str().unwrap(),
        "--epsilon",
        "0",
        "--spec",
        "cls:0",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!out.stderr.is_empty());
}

#[test]
fn malformed_flags_exit_with_usage() {
    let out = run(&["verify", "--epsilon", "not-a-number"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn results_csv_schema_is_stable() {
    let (model, input, argmax) = setup_model(14);
    let results = tmp("results.csv");
    let args = [
        "verify",
        "--model",
        model.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--epsilon",
        "0.01",
        "--spec",
        &format!("cls:{argmax}"),
        "--method",
        "box",
        "--seed",
        "7",
        "--out",
        results.to_str().unwrap(),
    ];
    run(&args);
    let first = std::fs::read_to_string(&results).unwrap();
    run(&args);
    let second = std::fs::read_to_string(&results).unwrap();

    let header = first.lines().next().unwrap();
    assert_eq!(
        header,
        "input_id,method,epsilon,status,margin_or_mae_bound,graph_nodes,graph_edges,millis"
    );
    // identical apart from the timing column
    let strip_millis = |text: &str| -> Vec<String> {
        text.lines()
            .map(|l| l.rsplit_once(',').map(|(head, _)| head.to_string()).unwrap_or_default())
            .collect()
    };
    assert_eq!(strip_millis(&first), strip_millis(&second));
}

#[test]
fn demo_graph_has_expected_shape() {
    let out = run(&["graph", "--demo"]);
    assert_eq!(out.status.code(), Some(0));
    let dot = stdout(&out);
    assert_eq!(dot.matches("[label=\"").count() - dot.matches(" -> ").count(), 8);
    assert_eq!(dot.matches(" -> ").count(), 12);
}

#[test]
fn solve_lists_the_trajectory() {
    let (model, input, _) = setup_model(15);
    let out = run(&[
        "solve",
        "--model",
        model.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains("trajectory:"));
    assert!(text.contains("(1,0)"), "terminal state listed");
}

#[test]
fn bench_outputs_are_deterministic_given_seed() {
    let a_path = tmp("bench-a.csv");
    let b_path = tmp("bench-b.csv");
    for path in [&a_path, &b_path] {
        let out = run(&[
            "bench",
            "cas-vs-as",
            "--states",
            "10",
            "--seed",
            "5",
            "--out",
            path.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0));
    }
    assert_eq!(
        std::fs::read_to_string(&a_path).unwrap(),
        std::fs::read_to_string(&b_path).unwrap()
    );
}

#[test]
fn lcap_generator_prints_instance() {
    let out = run(&["gen", "lcap", "--d", "3", "--m", "4", "--seed", "2"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 4 + 2);
}

#[test]
fn regression_spec_roundtrip() {
    let model_path = tmp("reg-model.json");
    run(&[
        "gen", "model", "--dims", "3,4,2", "--seed", "21",
        "--output", "regression",
        "--out", model_path.to_str().unwrap(),
    ]);
    let model = gains_core::model::load_model(&model_path).unwrap();
    let y = model
        .forward(&gains_core::math::Vector(vec![0.0, 0.1, 0.0]))
        .unwrap();
    let input_path = tmp("reg-input.csv");
    // observed targets close to the prediction keep the error small
    std::fs::write(
        &input_path,
        format!("0.0,0.1,0.0,m0={},m1={}\n", y.0[0] + 0.05, y.0[1] - 0.05),
    )
    .unwrap();
    let out = run(&[
        "verify",
        "--model",
        model_path.to_str().unwrap(),
        "--input",
        input_path.to_str().unwrap(),
        "--epsilon",
        "0.005",
        "--spec",
        "reg:0.1,0.01",
        "--method",
        "gains",
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("verified"));
}
