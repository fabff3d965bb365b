use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use actgraph::pipeline::RunConfig;

fn actgraph(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_actgraph"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"{
  "dataset": { "per_class": 5, "image_size": 32 },
  "cnn": { "height": 32, "width": 32 },
  "gcn": { "depth": 2, "hidden_dim": 8 },
  "edge": { "alpha": 0.25, "beta": 0.1 },
  "cotrain": { "epochs": 1, "batch_size": 4 }
}"#;

#[test]
fn config_prints_the_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let o = actgraph(&["config"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(RunConfig::from_json(&text, "stdout").unwrap(), RunConfig::default());
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), r#"{"gcn": {"depht": 3}}"#).unwrap();
    let o = actgraph(&["config", "--config", "c.json"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("depht"), "{}", stderr(&o));
}

#[test]
fn bad_usage_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&actgraph(&["train", "--mode", "both"], dir.path())), 1);
    assert_eq!(code(&actgraph(&["--help"], dir.path())), 0);
}

#[test]
fn io_failure_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("blocker"), b"").unwrap();
    let o = actgraph(&["generate", "--out", "blocker/data"], dir.path());
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.json"), TINY).unwrap();
    let run = |args: &[&str]| {
        let o = actgraph(args, d);
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
        o
    };
    run(&["generate", "--config", "tiny.json", "--seed", "3", "--out", "data"]);
    assert!(d.join("data/manifest.json").is_file());
    run(&["ingest", "--config", "tiny.json", "data"]);

    let early = actgraph(&["train", "--config", "tiny.json", "data", "--out", "early"], d);
    assert_eq!(code(&early), 1);
    assert!(stderr(&early).contains("build-graphs"));

    run(&["build-graphs", "--config", "tiny.json", "--jobs", "2", "data"]);
    run(&["train", "--config", "tiny.json", "data", "--mode", "cotrain", "--out", "runs/co"]);
    run(&["train", "--config", "tiny.json", "data", "--mode", "independent", "--seeds", "2", "--jobs", "2", "--out", "runs/ind"]);
    for f in ["config.json", "history.csv", "metrics.json", "cnn.ckpt", "gcn.ckpt", "features.csv"] {
        assert!(d.join("runs/co").join(f).is_file(), "{f}");
    }
    let echo = RunConfig::load(&d.join("runs/co/config.json")).unwrap();
    assert_eq!(echo.cotrain.epochs, 1);
    assert!(d.join("runs/ind/summary.json").is_file());

    let o = run(&["report", "runs/co", "runs/ind", "--out", "report"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("3 runs"));
    let csv = fs::read_to_string(d.join("report/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    let img = "data/images/c0_0000.ppm";
    run(&["explain", "--checkpoint", "runs/co/cnn.ckpt", "--checkpoint", "runs/ind/seed_0/cnn.ckpt", "--image", img, "--shared-norm", "--out", "cam"]);
    assert!(d.join("cam/side_by_side.ppm").is_file());
    let bad = actgraph(&["explain", "--checkpoint", "runs/co/cnn.ckpt", "--image", img, "--class", "7", "--out", "cam2"], d);
    assert_eq!(code(&bad), 1, "{}", stderr(&bad));
    let wrong = actgraph(&["explain", "--checkpoint", "runs/co/gcn.ckpt", "--image", img, "--out", "cam3"], d);
    assert_eq!(code(&wrong), 1);
}

#[test]
fn adapt_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"segadapt": {"image_size": 8, "n_source": 4, "n_target": 4, "n_eval": 2, "epochs": 1, "batch_size": 2, "width": 2}}"#;
    fs::write(dir.path().join("a.json"), cfg).unwrap();
    let o = actgraph(&["adapt", "--config", "a.json", "--out", "adapt"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let trace = fs::read_to_string(dir.path().join("adapt/trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 3);
    assert!(dir.path().join("adapt/config.json").is_file());
}
