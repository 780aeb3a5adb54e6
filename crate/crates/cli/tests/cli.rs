//! End-to-end runs of the command-line entry point.

use std::path::Path;

use cmmnl_cli::run;

const SPEC: &str = r#"{
  "n_individuals": 30,
  "occasions_per_individual": 4,
  "n_alternatives": 3,
  "attributes": [
    {"name": "asc_b", "dist": {"dist": "asc", "alternative": 1}},
    {"name": "tc"},
    {"name": "tt"}
  ],
  "true_alpha": [0.4],
  "true_zeta": [-0.8, -0.5],
  "true_tau": [0.3, 0.3],
  "context": [
    {"name": "rain", "dist": {"dist": "bernoulli", "p": 0.5}},
    {"name": "commute", "dist": {"dist": "bernoulli", "p": 0.5}},
    {"name": "amount", "dist": {"dist": "exponential", "rate": 1.0, "p_positive": 0.6}}
  ],
  "shift": {"kind": "interaction_cell", "dims": [0, 1], "shift": [0.5, 0.0, 0.0]},
  "sigma_c": 0.0,
  "seed": 3
}"#;

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("cmmnl").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Simulates a small dataset and returns the directory.
fn simulated() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, SPEC).unwrap();
    let code = cli(&["simulate", "--spec", s(&spec), "--out-dir", s(dir.path()), "--seed", "5"]);
    assert_eq!(code, 0);
    // Keep the run short.
    let cfg_path = dir.path().join("config.json");
    let mut cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&cfg_path).unwrap()).unwrap();
    cfg["fit"]["max_steps"] = 120.into();
    cfg["fit"]["window"] = 10.into();
    cfg["fit"]["batch_size"] = 10.into();
    cfg["network"]["hidden"] = serde_json::json!([4]);
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    dir
}

fn estimate(dir: &Path, out: &str, extra: &[&str]) -> i32 {
    let d = |f: &str| dir.join(f).to_str().unwrap().to_string();
    let (c, x, m, o) = (d("choices.csv"), d("context.csv"), d("config.json"), d(out));
    let mut args = vec!["estimate", "--model", "cmmnl", "--choices", &c, "--context", &x, "--config", &m, "--out", &o];
    args.extend_from_slice(extra);
    cli(&args)
}

#[test]
fn simulate_writes_all_files() {
    let dir = simulated();
    for f in ["choices.csv", "context.csv", "config.json", "truth.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let ctx = std::fs::read_to_string(dir.path().join("context.csv")).unwrap();
    assert!(ctx.starts_with("occasion_id,rain,commute,amount\n"));
    assert_eq!(ctx.lines().count(), 121);
}

#[test]
fn estimate_twice_gives_identical_artifacts() {
    let dir = simulated();
    assert_eq!(estimate(dir.path(), "fit.json", &["--seed", "7"]), 0);
    let first = std::fs::read(dir.path().join("fit.json")).unwrap();
    let trace_a = std::fs::read_to_string(dir.path().join("fit.trace.csv")).unwrap();
    assert_eq!(estimate(dir.path(), "fit.json", &["--seed", "7"]), 0);
    let second = std::fs::read(dir.path().join("fit.json")).unwrap();
    assert_eq!(first, second);
    let trace_b = std::fs::read_to_string(dir.path().join("fit.trace.csv")).unwrap();
    let strip = |t: &str| t.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect::<Vec<_>>();
    assert_eq!(strip(&trace_a), strip(&trace_b));
    let text = String::from_utf8(first).unwrap();
    assert!(text.contains("\"schema_version\": 1"));
    assert!(text.contains("\"trace_path\": \"fit.trace.csv\""));
    assert!(dir.path().join("fit.metrics.json").exists());

    assert_eq!(estimate(dir.path(), "other.json", &["--seed", "8"]), 0);
    assert_ne!(second, std::fs::read(dir.path().join("other.json")).unwrap());
}

#[test]
fn analysis_commands_on_a_fitted_artifact() {
    let dir = simulated();
    assert_eq!(estimate(dir.path(), "fit.json", &[]), 0);
    let p = |f: &str| dir.path().join(f).to_str().unwrap().to_string();
    let fit = p("fit.json");

    let scen = p("scen.csv");
    assert_eq!(cli(&["scenario", "--fit", &fit, "--grid", "all-binary", "--out", &scen, "--marginal"]), 0);
    let text = std::fs::read_to_string(&scen).unwrap();
    assert!(text.starts_with("scenario,row,rain,commute,amount,asc_b,tc,tt\n"), "{text}");
    assert_eq!(text.lines().filter(|l| l.contains(",shift,")).count(), 4);
    assert_eq!(cli(&["scenario", "--fit", &fit, "--grid", "one-at-a-time", "--reference", "amount=1.5"]), 0);

    let sweep = p("sweep.csv");
    let args = ["sweep", "--fit", &fit, "--dim", "amount", "--from", "0", "--to", "5", "--steps", "50"];
    assert_eq!(cli(&[&args[..], &["--out", &sweep, "--at", "commute=1"]].concat()), 0);
    let text = std::fs::read_to_string(&sweep).unwrap();
    assert_eq!(text.lines().count(), 51);
    assert!(text.starts_with("amount,asc_b,tc,tt\n"));
    assert!(text.lines().nth(1).unwrap().starts_with("0,0,0,0"));
    assert_eq!(cli(&["sweep", "--fit", &fit, "--dim", "rain", "--from", "0", "--to", "1", "--steps", "5"]), 1);
    assert_eq!(cli(&["sweep", "--fit", &fit, "--dim", "amount", "--from", "1", "--to", "1", "--steps", "5"]), 1);

    let preds = p("preds.csv");
    let (c, x) = (p("choices.csv"), p("context.csv"));
    assert_eq!(cli(&["predict", "--fit", &fit, "--choices", &c, "--context", &x, "--out", &preds]), 0);
    assert_eq!(std::fs::read_to_string(&preds).unwrap().lines().count(), 1 + 120 * 3);

    let metrics = p("metrics.json");
    assert_eq!(cli(&["metrics", "--fit", &fit, "--choices", &c, "--context", &x, "--out", &metrics]), 0);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    assert_eq!(m["n_obs"], 120);
    let avg = m["avg_choice_prob"].as_f64().unwrap();
    assert!(avg > 0.0 && avg < 1.0);
}

#[test]
fn usage_and_validation_errors_exit_one() {
    assert_eq!(cli(&[]), 1);
    assert_eq!(cli(&["frobnicate"]), 1);
    assert_eq!(cli(&["scenario", "--fit", "x.json", "--bogus"]), 1);
    assert_eq!(cli(&["--help"]), 0);
    assert_eq!(cli(&["scenario", "--fit", "/nonexistent/fit.json"]), 1);
    let dir = simulated();
    assert_eq!(estimate(dir.path(), "fit.json", &["--threads", "0"]), 1);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"schema_version": 99}"#).unwrap();
    assert_eq!(cli(&["scenario", "--fit", s(&bad)]), 1);
}

#[test]
fn numerical_failure_exits_two_and_keeps_the_trace() {
    let dir = simulated();
    let cfg_path = dir.path().join("config.json");
    let mut cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&cfg_path).unwrap()).unwrap();
    cfg["fit"]["learning_rate"] = 1e6.into();
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(estimate(dir.path(), "fit.json", &[]), 2);
    assert!(dir.path().join("fit.trace.csv").exists());
    assert!(!dir.path().join("fit.json").exists());
}

#[test]
fn binary_reports_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_cmmnl");
    let out = std::process::Command::new(bin).arg("--nope").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}
