use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mtfqi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtfqi")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = mtfqi(args);
    assert!(
        out.status.success(),
        "mtfqi {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn generate_collect_train_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let ens = dir.path().join("ensemble.json");
    let data = dir.path().join("data.jsonl");
    let model = dir.path().join("model.json");
    let report = dir.path().join("report.json");

    ok(&["generate", "-S", "4", "-K", "2", "-H", "3", "-T", "3", "-d", "3", "--w-max", "100", "--seed", "7", "--out", p(&ens)]);
    ok(&["collect", "--ensemble", p(&ens), "--n", "60", "--behavior", "eps:0.2", "--seed", "3", "--out", p(&data)]);
    let header = fs::read_to_string(&data).unwrap();
    assert_eq!(header.lines().count(), 1 + 3 * 3 * 60);

    let train = ok(&["train", "--data", p(&data), "--encoders", p(&ens), "--mode", "global", "--out", p(&model)]);
    assert!(train.contains("chosen encoders"));
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&model).unwrap()).unwrap();
    assert_eq!(doc["kind"], "model");
    assert_eq!(doc["mode"], "global");

    let eval = ok(&["evaluate", "--model", p(&model), "--ensemble", p(&ens), "--data", p(&data), "--out", p(&report)]);
    assert!(eval.contains("λ_max"));
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(doc["kind"], "evaluation");
    assert_eq!(doc["error_optimal"]["delta"].as_array().unwrap().len(), 3);
    assert!(doc["inputs"]["lambda_max"].as_f64().unwrap() >= 1.0);

    // the same seeds give the same files
    let data2 = dir.path().join("data2.jsonl");
    ok(&["collect", "--ensemble", p(&ens), "--n", "60", "--behavior", "eps:0.2", "--seed", "3", "--out", p(&data2)]);
    assert_eq!(fs::read(&data).unwrap(), fs::read(&data2).unwrap());
}

#[test]
fn sweep_plot_and_slope() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    fs::write(
        &config,
        r#"{
  "schema_version": 1,
  "sweep_axis": "n",
  "values": [50, 200, 800],
  "fixed": {"S": 4, "K": 2, "d": 3, "T": 2, "n": 100, "H": 3, "gamma": 1.0, "num_encoders": 3,
            "corruption": 1.0, "behavior": "uniform", "delta": 0.05, "w_max": 100.0, "ridge": 1e-8},
  "seeds": [0, 1, 2, 3, 4],
  "csv": "n.csv",
  "plot": "n.svg"
}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let msg = ok(&["sweep", "--config", p(&config), "--out-dir", p(&out)]);
    assert!(msg.contains("15 rows, 0 failed"), "{msg}");
    let csv = out.join("n.csv");
    assert!(fs::read_to_string(&csv).unwrap().starts_with("axis,value,seed,status,d1_opt,"));
    assert!(out.join("n.timings.csv").exists());
    assert!(fs::read_to_string(out.join("n.svg")).unwrap().contains("class=\"mean-line\""));

    let svg = dir.path().join("plot.svg");
    ok(&["plot", "--csv", p(&csv), "--axis", "n", "--response", "d1_opt_sq", "--out", p(&svg)]);
    assert_eq!(fs::read_to_string(&svg).unwrap().matches("class=\"point\"").count(), 15);

    let slope = ok(&["slope", "--csv", p(&csv), "--response", "d1_opt_sq"]);
    let value: f64 = slope.lines().next().unwrap().strip_prefix("slope = ").unwrap().parse().unwrap();
    assert!(value < 0.0, "{slope}");
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let out = mtfqi(&["collect", "--ensemble", p(&missing), "--n", "5", "--out", p(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:") && err.contains("missing.json"), "{err}");

    let csv = dir.path().join("r.csv");
    fs::write(&csv, "value,status,d1_opt\n1,ok,0.5\n2,ok,0.25\n").unwrap();
    let out = mtfqi(&["slope", "--csv", p(&csv), "--response", "nope"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));

    assert!(!mtfqi(&["collect", "--ensemble", "x", "--n", "5", "--behavior", "greedy", "--out", "y"]).status.success());
}
