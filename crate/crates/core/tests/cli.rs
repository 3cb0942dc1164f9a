use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use hoc_router::io::{ingest, manifest_path, sha256_file, RunManifest};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hoc-router"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    model: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("data");
        let o = run(&[
            "generate-synthetic", "--out-dir", s(&data), "--train", "2000", "--calibration", "1000",
            "--test", "300", "--k", "10", "--test-k", "10", "--seed", "3",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let model = root.join("model.json");
        let o = run(&[
            "calibrate", "--in", s(&data.join("calibration.jsonl")), "--partition", "topclass:5",
            "--recalibrate", "--out", s(&model),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        Fixture { _dir: dir, root, model }
    }

    fn test_set(&self) -> PathBuf {
        self.root.join("data").join("test.jsonl")
    }
}

#[test]
fn generate_writes_three_datasets_and_manifest() {
    let f = Fixture::new();
    for name in ["train", "calibration", "test"] {
        let p = f.root.join("data").join(format!("{name}.jsonl"));
        assert!(!ingest(&p).unwrap().is_empty());
    }
    let m = RunManifest::read(&manifest_path(&f.model)).unwrap();
    assert!(m.calibration_executed);
    assert_eq!(m.command, "calibrate");
    assert_eq!(m.outputs[0].sha256, sha256_file(&f.model).unwrap());
}

#[test]
fn route_streams_stdin_to_stdout() {
    let f = Fixture::new();
    let input = fs::read_to_string(f.test_set()).unwrap();
    let mut child = bin()
        .args(["route", "--model", s(&f.model), "--loss", "brier", "--alpha", "0.1", "--beta", "0.3"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let ids: Vec<String> = input
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["id"].as_str().unwrap().to_string())
        .collect();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), ids.len());
    for (v, id) in lines.iter().zip(&ids) {
        assert_eq!(v["id"].as_str().unwrap(), id);
        let costs = v["est_costs"].as_object().unwrap();
        assert_eq!(costs.len(), 3);
        let chosen = costs[v["action"].as_str().unwrap()].as_f64().unwrap();
        assert!(costs.values().all(|c| c.as_f64().unwrap() >= chosen));
    }
}

#[test]
fn infinite_beta_reports_null_abstain_cost_and_never_abstains() {
    let f = Fixture::new();
    let out = f.root.join("r.jsonl");
    let o = run(&[
        "route", "--model", s(&f.model), "--loss", "brier", "--alpha", "0.05", "--in", s(&f.test_set()),
        "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for l in fs::read_to_string(&out).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert_ne!(v["action"], "abstain");
        assert!(v.to_string().contains("null"));
    }
    let m = RunManifest::read(&manifest_path(&out)).unwrap();
    assert!(!m.calibration_executed);
}

#[test]
fn sweep_has_fifteen_betas_per_policy() {
    let f = Fixture::new();
    let out = f.root.join("sweep.csv");
    let o = run(&[
        "sweep", "--model", s(&f.model), "--test", s(&f.test_set()), "--loss", "brier", "--alpha", "0.05",
        "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "alpha,beta,policy,mean_cost,std_error,est_mean_cost,paired_se");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    for policy in ["three_way", "predict_route", "predict_abstain"] {
        assert_eq!(rows.iter().filter(|r| r[2] == policy).count(), 15, "{policy}");
    }
}

#[test]
fn curve_accepts_all_losses_and_external_scores() {
    let f = Fixture::new();
    let scores = f.root.join("scores.csv");
    let mut csv = String::from("id,score\n");
    for e in ingest(&f.test_set()).unwrap() {
        csv.push_str(&format!("{},{}\n", e.id, e.weak_pred.prob(1)));
    }
    fs::write(&scores, csv).unwrap();
    let out = f.root.join("curves.csv");
    let o = run(&[
        "curve", "--model", s(&f.model), "--test", s(&f.test_set()), "--loss", "all", "--scores", s(&scores),
        "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().next().unwrap(), "policy,loss,fraction,mean_loss");
    // six policies times six losses times 101 grid points
    assert_eq!(text.lines().count(), 1 + 6 * 6 * 101);
}

#[test]
fn diagnose_reports_wasserstein_and_quality() {
    let f = Fixture::new();
    let out = f.root.join("diag.json");
    let o = run(&[
        "diagnose", "--model", s(&f.model), "--reference", s(&f.test_set()), "--loss", "brier", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert!(v["mean_wasserstein"].as_f64().unwrap() >= 0.0);
    assert!(v["partition_quality"]["brier"].is_object());
}

#[test]
fn self_test_passes_at_full_trial_count() {
    let o = run(&["diagnose", "--self-test", "--trials", "100000"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().count() > 0);
    assert!(text.lines().all(|l| l.contains("PASS")), "{text}");
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&["route"]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_print_one_tagged_line() {
    let f = Fixture::new();
    let test = f.test_set();
    let missing_out = f.root.join("m.json");
    let cases: [(&[&str], &str); 3] = [
        (&["route", "--model", s(&f.model), "--loss", "hinge", "--alpha", "0.1", "--in", s(&test)], "error["),
        (&["calibrate", "--in", "/nonexistent/x.jsonl", "--out", s(&missing_out)], "error["),
        (&["route", "--model", s(&test), "--loss", "brier", "--alpha", "0.1"], "error[format]"),
    ];
    for (args, prefix) in cases {
        let o = run(args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        let err = stderr(&o);
        let tagged: Vec<&str> = err.lines().filter(|l| l.starts_with("error[")).collect();
        assert_eq!(tagged.len(), 1, "{err}");
        assert!(tagged[0].starts_with(prefix), "{err}");
    }
}

#[test]
fn malformed_record_names_line_and_field() {
    let f = Fixture::new();
    let bad = f.root.join("bad.jsonl");
    let good = fs::read_to_string(f.test_set()).unwrap();
    let first = good.lines().next().unwrap();
    fs::write(&bad, format!("{first}\n{{\"id\":\"z\",\"weak_probs\":[0.5,0.7],\"labels\":[0]}}\n")).unwrap();
    let o = run(&["route", "--model", s(&f.model), "--loss", "brier", "--alpha", "0.1", "--in", s(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("error[malformed-record]"), "{err}");
    assert!(err.contains('2') && err.contains("weak_probs"), "{err}");
}
