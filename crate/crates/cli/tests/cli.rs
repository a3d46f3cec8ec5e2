use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use respalloc::datasets::{load_trajectories, group_by_trajectory};
use respalloc::models::load_checkpoint;
use respalloc::setup::FilterSetup;

fn respalloc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_respalloc"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = respalloc(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn lines(path: PathBuf) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count()
}

fn json(path: PathBuf) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synthetic_generation_writes_requested_samples() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let stdout = ok(d, &["generate", "--scenario", "synthetic-2agent", "--n", "128", "--gamma", "0.3", "--seed", "1", "--out", "a.ndjson"]);
    assert!(stdout.contains("128 samples"), "{stdout}");
    assert!(stdout.contains("active"), "{stdout}");
    let (header, samples) = load_trajectories(&d.join("a.ndjson")).unwrap();
    assert_eq!(samples.len(), 128);
    assert_eq!(header.scenario, "synthetic-2agent");
    assert_eq!(header.config.as_ref().unwrap()["seed"], 1);

    let again = tempfile::tempdir().unwrap();
    ok(again.path(), &["generate", "--scenario", "synthetic-2agent", "--n", "128", "--gamma", "0.3", "--seed", "1", "--out", "a.ndjson"]);
    assert_eq!(
        std::fs::read(d.join("a.ndjson")).unwrap(),
        std::fs::read(again.path().join("a.ndjson")).unwrap()
    );
}

#[test]
fn noiseless_generation_is_recoverable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["generate", "--scenario", "synthetic-2agent", "--n", "64", "--gamma", "0.3", "--noise", "0", "--out", "a.ndjson", "--csv", "a.csv"]);
    let (header, samples) = load_trajectories(&d.join("a.ndjson")).unwrap();
    let setup = FilterSetup::new(header.filter.unwrap()).unwrap();
    for s in &samples {
        let u = setup.solve(&s.x, &s.stacked_u_des().unwrap(), &[0.3, 0.7]).unwrap().controls;
        assert_eq!(u, s.stacked_u());
    }
    assert_eq!(lines(d.join("a.csv")), 65);
    assert!(d.join("a.csv.meta.json").exists());
}

#[test]
fn weaving_generation_counts_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["generate", "--scenario", "weaving-rear-overtake", "--count", "20", "--out", "w.ndjson", "--truth-out", "truth.json"]);
    let (header, samples) = load_trajectories(&d.join("w.ndjson")).unwrap();
    assert_eq!(header.scenario, "weaving-rear-overtake");
    assert_eq!(group_by_trajectory(&samples).len(), 20);
    assert!(load_checkpoint(&d.join("truth.json")).unwrap().to_model().is_ok());
}

#[test]
fn invalid_inputs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for args in [
        vec!["train", "--data", "missing.ndjson"],
        vec!["generate", "--scenario", "traffic", "--out", "x.ndjson"],
        vec!["generate", "--scenario", "synthetic-2agent", "--gamma", "0.5,0.6", "--out", "x.ndjson"],
        vec!["generate", "--scenario", "synthetic-2agent", "--out", "no/such/dir/x.ndjson"],
        vec!["landscape", "--checkpoint", "missing.json", "--out", "l.csv"],
        vec!["bench", "--min-batch", "64", "--max-batch", "8"],
        vec!["train", "--nonsense"],
    ] {
        let out = respalloc(d, &args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(!out.stderr.is_empty());
    }
    std::fs::write(d.join("bad.ndjson"), "{\"version\":1}\n").unwrap();
    let out = respalloc(d, &["train", "--data", "bad.ndjson"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn training_writes_checkpoint_report_and_loss_trace() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["generate", "--scenario", "synthetic-2agent", "--n", "128", "--gamma", "0.3", "--seed", "1", "--out", "a.ndjson"]);
    std::fs::write(d.join("run.json"), r#"{"train": {"epochs": 50, "batch_size": 8}}"#).unwrap();
    ok(d, &[
        "train", "--config", "run.json", "--data", "a.ndjson", "--model", "constant", "--optimizer", "sgd", "--lr", "0.005",
        "--epochs", "400", "--out", "c.json", "--report", "r.json", "--loss-csv", "l.csv",
    ]);
    let report = json(d.join("r.json"));
    assert_eq!(report["run"]["train"]["epochs"], 400);
    assert_eq!(report["run"]["train"]["batch_size"], 8);
    assert_eq!(report["report"]["epochs"].as_array().unwrap().len(), 400);
    let gamma = report["report"]["final_gamma"][0].as_f64().unwrap();
    assert!((gamma - 0.3).abs() <= 0.05, "{gamma}");
    assert_eq!(lines(d.join("l.csv")), 401);
    assert!(std::fs::read_to_string(d.join("l.csv")).unwrap().starts_with("epoch,loss,wall_ms,step_ms,gamma_1,gamma_2"));
    let model = load_checkpoint(&d.join("c.json")).unwrap().to_model().unwrap();
    assert!((model.eval(&[]).unwrap()[0] - gamma).abs() < 1e-12);
}

#[test]
fn divergence_exits_with_code_three_and_partial_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["generate", "--scenario", "synthetic-2agent", "--n", "32", "--out", "a.ndjson"]);
    std::fs::write(d.join("run.json"), r#"{"train": {"epochs": 10, "divergence_threshold": 1e-12}}"#).unwrap();
    let out = respalloc(d, &["train", "--config", "run.json", "--data", "a.ndjson", "--out", "c.json", "--report", "r.json"]);
    assert_eq!(out.status.code(), Some(3));
    let report = json(d.join("r.json"));
    assert_eq!(report["report"]["diverged"], true);
    assert_eq!(report["report"]["epochs"].as_array().unwrap().len(), 1);
    assert!(!d.join("c.json").exists());
}

#[test]
fn windowed_training_reports_each_window() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["generate", "--scenario", "synthetic-2agent", "--n", "256", "--schedule", "0:0.2,128:0.8", "--out", "a.ndjson"]);
    ok(d, &["train", "--data", "a.ndjson", "--window", "128", "--optimizer", "sgd", "--lr", "0.005", "--batch-size", "8", "--epochs", "300", "--report", "r.json"]);
    let windows = json(d.join("r.json"))["windows"].as_array().unwrap().clone();
    assert_eq!(windows.len(), 2);
    for (w, truth) in windows.iter().zip([0.2, 0.8]) {
        assert!((w["gamma"][0].as_f64().unwrap() - truth).abs() <= 0.1, "{w}");
    }
}

#[test]
fn landscape_and_trace_exports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["generate", "--scenario", "weaving-mixed", "--count", "4", "--seed", "2", "--out", "w.ndjson", "--truth-out", "truth.json"]);
    ok(d, &["train", "--data", "w.ndjson", "--model", "relative-symmetric", "--hidden", "8,8", "--epochs", "3", "--batch-size", "64", "--out", "sym.json"]);
    ok(d, &["landscape", "--checkpoint", "sym.json", "--out", "grid.csv", "--resolution", "50"]);
    let text = std::fs::read_to_string(d.join("grid.csv")).unwrap();
    assert_eq!(text.lines().count(), 2501);
    assert_eq!(text.lines().next().unwrap(), "r_lon,v_lon,gamma_1,inactive");

    // Negated grid: same cells reflected through the origin.
    ok(d, &["landscape", "--checkpoint", "sym.json", "--out", "neg.csv", "--resolution", "11", "--x-range", "-15,15", "--y-range", "-4,4", "--fixed", "0,1.85,0,0"]);
    ok(d, &["landscape", "--checkpoint", "sym.json", "--out", "pos.csv", "--resolution", "11", "--x-range", "-15,15", "--y-range", "-4,4", "--fixed", "0,-1.85,0,0"]);
    let read = |name: &str| -> Vec<f64> {
        std::fs::read_to_string(d.join(name))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
            .collect()
    };
    let (pos, neg) = (read("pos.csv"), read("neg.csv"));
    for (k, g) in pos.iter().enumerate() {
        assert!((g + neg[120 - k] - 1.0).abs() <= 1e-12);
    }

    let out = respalloc(d, &["landscape", "--checkpoint", "sym.json", "--out", "bad.csv", "--x-axis", "yaw"]);
    assert_eq!(out.status.code(), Some(2));

    let stdout = ok(d, &["trace", "--checkpoint", "truth.json", "--data", "w.ndjson", "--trajectory", "1", "--out", "trace.csv"]);
    assert!(stdout.contains("160 timesteps"), "{stdout}");
    assert_eq!(lines(d.join("trace.csv")), 161);
    assert!(d.join("trace.csv.meta.json").exists());
    let out = respalloc(d, &["trace", "--checkpoint", "truth.json", "--data", "w.ndjson", "--trajectory", "99", "--out", "t.csv"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn trace_rejects_mismatched_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["generate", "--scenario", "weaving-single", "--out", "w.ndjson", "--truth-out", "truth.json"]);
    ok(d, &["generate", "--scenario", "synthetic-2agent", "--n", "8", "--out", "s.ndjson"]);
    let out = respalloc(d, &["trace", "--checkpoint", "truth.json", "--data", "s.ndjson", "--out", "t.csv"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bench_sweep_has_one_row_per_size() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let stdout = ok(d, &["bench", "--repeats", "2", "--min-samples", "256", "--out", "bench.csv"]);
    assert!(stdout.contains("fitted exponent"), "{stdout}");
    let text = std::fs::read_to_string(d.join("bench.csv")).unwrap();
    assert_eq!(text.lines().count(), 8);
    assert_eq!(text.lines().next().unwrap(), "batch_size,loss_grad_ms");
    let meta = json(d.join("bench.csv.meta.json"));
    assert!(meta["exponent"].as_f64().unwrap().is_finite());
}
