use std::path::{Path, PathBuf};
use std::process::Command;

use privtrade::cli::{self, CommandResult, EXIT_INFEASIBLE, EXIT_MODEL, EXIT_OK, EXIT_USAGE};
use privtrade::io;
use privtrade_core::crlb;
use serde_json::Value;

const PLAIN: &str = r#"{"agent_dims":[3],"H":[[1,0],[0,1],[0,0]],"R":[[1,0,0],[0,1,0],[0,0,1]],"U":[[1,0]],"G":[[[0,1]]]}"#;
const PLAIN_BLIND: &str = r#"{"agent_dims":[3],"H":[[1,0],[0,1],[0,0]],"R":[[1,0,0],[0,1,0],[0,0,1]],"U":[[1,0]],"G":[[[1,0]]]}"#;
const PRIOR: &str = r#"{"agent_dims":[2],"H":[[1,0],[0,1]],"R":[[1,0],[0,1]],"J0":[[1,0],[0,1]],"U":[[1,0]],"G":[[[0,1]]]}"#;
const PRIOR_BLIND: &str = r#"{"agent_dims":[2],"H":[[1,0],[0,1]],"R":[[1,0],[0,1]],"J0":[[1,0],[0,1]],"U":[[1,0]],"G":[[[1,0]]]}"#;

fn fixture(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn run(args: &[&str]) -> CommandResult {
    cli::run(std::iter::once("privtrade").chain(args.iter().copied()))
}

fn json(r: &CommandResult) -> Value {
    assert_eq!(r.exit_code, EXIT_OK, "{}", r.stderr);
    serde_json::from_str(&r.stdout).unwrap()
}

fn f(v: &Value) -> f64 {
    v.as_f64().unwrap()
}

#[test]
fn check_asup_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let v = json(&run(&["check-asup", &fixture(dir.path(), "a.json", PLAIN)]));
    assert_eq!(v["achievable"], true);
    assert_eq!(v["case"], "no-prior");
    assert_eq!(v["private"][0]["witnesses"][0], 0);

    let v = json(&run(&["check-asup", &fixture(dir.path(), "b.json", PRIOR_BLIND)]));
    assert_eq!(v["achievable"], false);
    assert!((f(&v["agents"][0]["residual"]) - 0.5).abs() < 1e-15);

    let bad = fixture(dir.path(), "bad.json", r#"{"agent_dims":[3],"H":[[1,0]]"#);
    let r = run(&["check-asup", &bad]);
    assert_eq!(r.exit_code, EXIT_MODEL);
    assert!(r.stdout.is_empty() && r.stderr.starts_with("error:"));
    assert_eq!(run(&["check-asup", "/nonexistent/model.json"]).exit_code, EXIT_MODEL);
}

#[test]
fn usage_errors() {
    assert_eq!(run(&[]).exit_code, EXIT_USAGE);
    assert_eq!(run(&["construct", "m.json"]).exit_code, EXIT_USAGE);
    let dir = tempfile::tempdir().unwrap();
    let plain = fixture(dir.path(), "a.json", PLAIN);
    assert_eq!(run(&["construct", &plain, "--eps", "1", "--policy", "mine"]).exit_code, EXIT_USAGE);
    assert_eq!(run(&["construct", &plain, "--eps", "1,2"]).exit_code, EXIT_MODEL);
    assert_eq!(run(&["simulate", "--figure", "7"]).exit_code, EXIT_USAGE);
    assert_eq!(run(&["--help"]).exit_code, EXIT_OK);
}

#[test]
fn construct_examples() {
    let dir = tempfile::tempdir().unwrap();
    let v = json(&run(&["construct", &fixture(dir.path(), "a.json", PLAIN), "--eps", "5"]));
    assert!(f(&v["report"]["utility"]).abs() <= 1e-9);
    assert!(f(&v["report"]["privacy"][0]) >= 5.0);
    assert_eq!(v["report"]["eps_max"][0], Value::Null);

    let r = run(&["construct", &fixture(dir.path(), "b.json", PLAIN_BLIND), "--eps", "5"]);
    assert_eq!(r.exit_code, EXIT_INFEASIBLE);
    assert!(!r.stderr.is_empty());

    let prior = fixture(dir.path(), "c.json", PRIOR);
    for eps in ["1", "1.5"] {
        let r = run(&["construct", &prior, "--eps", eps]);
        assert_eq!(r.exit_code, EXIT_INFEASIBLE);
        assert!(r.stderr.contains("threshold-at-or-above-eps-max"), "{}", r.stderr);
    }
    let v = json(&run(&["construct", &prior, "--eps", "0.5"]));
    let lam = f(&v["sanitization"]["Theta"][1][1]);
    assert!((f(&v["report"]["privacy"][0]) - lam / (2.0 + lam)).abs() < 1e-12);
}

#[test]
fn constructed_noise_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = fixture(dir.path(), "a.json", PLAIN);
    for eps in ["5", "1e6"] {
        let v = json(&run(&["construct", &path, "--eps", eps]));
        let m = io::load_model(Path::new(&path)).unwrap();
        let s = io::parse_sanitization(&v["sanitization"].to_string(), m.agent_dims()).unwrap();
        let r = crlb::tradeoff_report(&m, &s).unwrap();
        assert!((r.utility - f(&v["report"]["utility"])).abs() <= 1e-12);
        assert!((r.privacy[0] - f(&v["report"]["privacy"][0])).abs() <= 1e-12 * r.privacy[0].max(1.0));
    }
}

#[test]
fn max_privacy_examples() {
    let dir = tempfile::tempdir().unwrap();
    let plain = fixture(dir.path(), "a.json", PLAIN);
    let dump = dir.path().join("problem.txt");
    for delta in [1.0, 2.0] {
        let v = json(&run(&["max-privacy", &plain, "--delta", &delta.to_string(), "--dump-problem", dump.to_str().unwrap()]));
        assert!((f(&v["report"]["privacy"][0]) - delta).abs() < 1e-5);
        assert!(f(&v["report"]["utility"]) >= -1e-6);
        assert_eq!(v["solver"]["status"], "Optimal");
    }
    assert!(!std::fs::read_to_string(&dump).unwrap().is_empty());

    let full = fixture(dir.path(), "full.json", &PLAIN.replace(r#""U":[[1,0]]"#, r#""U":[[1,0],[0,1]]"#));
    let v = json(&run(&["max-privacy", &full, "--delta", "1"]));
    assert!(f(&v["report"]["privacy"][0]).abs() < 1e-6);

    let prior = fixture(dir.path(), "p.json", PRIOR);
    let v = json(&run(&["max-privacy", &prior, "--delta-unbounded"]));
    assert!((f(&v["report"]["privacy"][0]) - 1.0).abs() < 1e-4);
    let v = json(&run(&["max-privacy", &prior, "--delta", "2", "--normalized"]));
    assert!((f(&v["report"]["privacy"][0]) - 0.5).abs() < 1e-5);
}

#[test]
fn altopt_examples_and_trace_file() {
    let dir = tempfile::tempdir().unwrap();
    let plain = fixture(dir.path(), "a.json", PLAIN);
    let trace = dir.path().join("trace.csv");
    let v = json(&run(&["altopt", &plain, "--eps", "10", "--trace-out", trace.to_str().unwrap()]));
    assert!(f(&v["report"]["utility"]).abs() <= 1e-6);
    assert!(f(&v["report"]["privacy"][0]) >= 10.0 - 1e-4);
    let csv = std::fs::read_to_string(&trace).unwrap();
    let records = v["trace"]["records"].as_array().unwrap().len();
    assert_eq!(csv.lines().count(), records + 1);

    // zero thresholds: the least noisy optimum
    let v = json(&run(&["altopt", &plain, "--eps", "0"]));
    assert!(f(&v["report"]["utility"]).abs() <= 1e-6);

    let r = run(&["altopt", &fixture(dir.path(), "p.json", PRIOR), "--eps", "1"]);
    assert_eq!(r.exit_code, EXIT_INFEASIBLE);
}

#[test]
fn simulate_writes_csv() {
    let r = run(&["--seed", "2", "simulate", "--figure", "1", "--trials", "2"]);
    assert_eq!(r.exit_code, EXIT_OK, "{}", r.stderr);
    let mut rows = csv::Reader::from_reader(r.stdout.as_bytes());
    assert_eq!(rows.headers().unwrap().iter().collect::<Vec<_>>(), ["figure", "S", "U_dim", "eps", "iteration", "value", "n_trials", "n_failed"]);
    assert_eq!(rows.records().count(), 15);
}

#[test]
fn repeated_commands_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let plain = fixture(dir.path(), "a.json", PLAIN);
    let prior = fixture(dir.path(), "p.json", PRIOR);
    let cases: [&[&str]; 5] = [
        &["check-asup", &plain],
        &["construct", &prior, "--eps", "0.9"],
        &["max-privacy", &plain, "--delta", "1.5"],
        &["altopt", &plain, "--eps", "3", "--json-indent", "0"],
        &["--seed", "9", "simulate", "--figure", "4", "--trials", "2"],
    ];
    for args in cases {
        assert_eq!(run(args), run(args), "{args:?}");
    }
}

#[test]
fn binary_reports_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let exe = PathBuf::from(env!("CARGO_BIN_EXE_privtrade"));
    let out = Command::new(&exe).args(["check-asup", &fixture(dir.path(), "a.json", PLAIN)]).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_OK));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["achievable"], true);
    let out = Command::new(&exe).args(["construct", &fixture(dir.path(), "b.json", PLAIN_BLIND), "--eps", "1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_INFEASIBLE));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
