use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spillsynth::cli::{FitOutput, ReplicateOutput, TestOutput};
use spillsynth::inference::TestKind;

const BIN: &str = env!("CARGO_BIN_EXE_spillsynth");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8(out.stderr.clone()).unwrap();
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    assert_eq!(lines.len(), 1, "stderr should be one JSON object: {text}");
    serde_json::from_str(lines[0]).unwrap()
}

/// Simulated panel with concentrated spillovers; returns (csv, treatment label).
fn simulated_panel(dir: &Path, n: usize, pre: usize, post: usize, seed: u64) -> (PathBuf, String) {
    let config = write(
        dir,
        "dgp.json",
        &format!(
            r#"{{"model": {{"kind": "stationary", "n_units": {n}, "pre_periods": {pre}, "post_periods": {post}, "loading_seed": 3}},
               "pattern": {{"kind": "concentrated"}}}}"#
        ),
    );
    let csv = dir.join("panel.csv");
    let out = run(&["simulate", "--config", s(&config), "--seed", &seed.to_string(), "--output", s(&csv)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (csv, (pre + 1).to_string())
}

#[test]
fn simulate_then_fit_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (csv, treat) = simulated_panel(dir.path(), 10, 50, 2, 1);
    let structure = write(dir.path(), "s.json", r#"{"kind": "range", "affected": [2, 3, 4]}"#);
    let out = run(&["fit", "--panel", s(&csv), "--treatment-period", &treat, "--post-periods", "2", "--structure", s(&structure)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let fit: FitOutput = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(fit.units.len(), 10);
    assert_eq!(fit.effects.len(), 2);
    assert!(fit.invertibility.passed);
    for e in &fit.effects {
        assert_eq!(e.gamma_hat.len(), 4);
        assert_eq!(e.gamma_labels.len(), 4);
        assert!(e.foc_residual <= 1e-8 * 100.0);
    }
    assert_eq!(fit.effects[0].period, treat);

    let efficient = run(&[
        "fit", "--panel", s(&csv), "--treatment-period", &treat, "--structure", s(&structure), "--weighting", "efficient",
    ]);
    let fit: FitOutput = serde_json::from_slice(&efficient.stdout).unwrap();
    assert_eq!(fit.effects[0].weighting, "efficient");
}

#[test]
fn all_controls_equally_hit_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let (csv, treat) = simulated_panel(dir.path(), 10, 30, 1, 2);
    let structure = write(dir.path(), "s.json", r#"{"kind": "equal", "affected": [2, 3, 4, 5, 6, 7, 8, 9, 10]}"#);
    let out = run(&["fit", "--panel", s(&csv), "--treatment-period", &treat, "--structure", s(&structure)]);
    assert_eq!(out.status.code(), Some(3));
    let err = stderr_json(&out);
    assert!(err["error"]["message"].as_str().unwrap().contains("Condition IN"));
    assert_eq!(err["error"]["diagnostic"]["passed"], false);
    assert!(out.stdout.is_empty());
}

#[test]
fn input_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let (csv, treat) = simulated_panel(dir.path(), 6, 20, 1, 3);
    let structure = write(dir.path(), "s.json", r#"{"kind": "range", "affected": [2]}"#);

    let missing = run(&["fit", "--panel", "/nonexistent/panel.csv", "--treatment-period", &treat, "--structure", s(&structure)]);
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(stderr_json(&missing)["error"]["kind"], "io");

    let bad_period = run(&["fit", "--panel", s(&csv), "--treatment-period", "1999", "--structure", s(&structure)]);
    assert_eq!(bad_period.status.code(), Some(2));
    stderr_json(&bad_period);

    let broken = write(dir.path(), "broken.csv", "unit,1,2,3\na,1,2,3\nb,1,x,3\nc,1,2,3\n");
    let parse = run(&["fit", "--panel", s(&broken), "--treatment-period", "3", "--structure", s(&structure)]);
    assert_eq!(parse.status.code(), Some(2));
    assert_eq!(stderr_json(&parse)["error"]["kind"], "parse");

    let usage = run(&["fit"]);
    assert_eq!(usage.status.code(), Some(2));
}

#[test]
fn rank_deficient_hypothesis_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let (csv, treat) = simulated_panel(dir.path(), 6, 20, 1, 4);
    let structure = write(dir.path(), "s.json", r#"{"kind": "range", "affected": [2]}"#);
    let hyp = write(dir.path(), "h.json", r#"{"C": [[1, 0, 0, 0, 0, 0], [2, 0, 0, 0, 0, 0]], "d": [0, 0]}"#);
    let out = run(&[
        "test", "--panel", s(&csv), "--treatment-period", &treat, "--structure", s(&structure), "--hypothesis", s(&hyp),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_json(&out)["error"]["message"].as_str().unwrap().contains("C full row rank"));
}

#[test]
fn test_output_schema_and_families() {
    let dir = tempfile::tempdir().unwrap();
    let (csv, treat) = simulated_panel(dir.path(), 10, 40, 2, 5);
    let structure = write(dir.path(), "s.json", r#"{"kind": "range", "affected": [2, 3, 4]}"#);
    let hyp = write(dir.path(), "h.json", r#"{"C": [[0, 1, 0, 0, 0, 0, 0, 0, 0, 0]], "d": [0]}"#);
    let out_path = dir.path().join("tests.json");
    let out = run(&[
        "test", "--panel", s(&csv), "--treatment-period", &treat, "--post-periods", "2", "--structure", s(&structure),
        "--hypothesis", s(&hyp), "--tau", "0.1", "--family", "sp", "--family", "andrews", "--family", "placebo",
        "--joint", "--weighting", "studentized", "--loo", "--output", s(&out_path),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let parsed: TestOutput = serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    assert_eq!(parsed.null_sample, "leave_one_out");
    assert_eq!(parsed.tests.len(), 7);
    let kinds: Vec<TestKind> = parsed.tests.iter().map(|t| t.kind).collect();
    assert_eq!(kinds.iter().filter(|&&k| k == TestKind::Joint).count(), 1);
    for t in &parsed.tests {
        assert!((0.0..=1.0).contains(&t.p_value));
        assert_eq!(t.reject, t.statistic > t.critical_value);
        assert_eq!(t.tau, 0.1);
        if t.kind == TestKind::Joint {
            assert_eq!(t.null_sample.len(), 39);
        } else {
            assert!(t.period.is_some());
        }
    }
}

#[test]
fn no_effect_panel_reports_a_probability() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(
        dir.path(),
        "dgp.json",
        r#"{"model": {"kind": "stationary", "n_units": 8, "pre_periods": 60, "post_periods": 1, "loading_seed": 9}}"#,
    );
    let csv = dir.path().join("p.csv");
    assert!(run(&["simulate", "--config", s(&config), "--seed", "11", "-o", s(&csv)]).status.success());
    let structure = write(dir.path(), "s.json", r#"{"kind": "range", "affected": [2, 3]}"#);
    let hyp = write(dir.path(), "h.json", r#"{"C": [[1, 0, 0, 0, 0, 0, 0, 0]], "d": [0]}"#);
    let out = run(&[
        "test", "--panel", s(&csv), "--treatment-period", "61", "--structure", s(&structure), "--hypothesis", s(&hyp),
        "--tau", "0.1",
    ]);
    let parsed: TestOutput = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(parsed.tests.len(), 1);
    assert!((0.0..=1.0).contains(&parsed.tests[0].p_value));
}

#[test]
fn per_year_tests_on_a_state_panel_shape() {
    // 39 units observed 1970-2000 with treatment in 1989: one result per post year.
    let dir = tempfile::tempdir().unwrap();
    let (csv, _) = simulated_panel(dir.path(), 39, 19, 12, 6);
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    let header: Vec<String> = std::iter::once("state".to_string()).chain((1970..=2000).map(|y| y.to_string())).collect();
    lines.next();
    let body: Vec<&str> = lines.collect();
    let renamed = write(dir.path(), "states.csv", &format!("{}\n{}\n", header.join(","), body.join("\n")));
    let affected: Vec<String> = (2..=6).map(|i| i.to_string()).collect();
    let structure = write(dir.path(), "s.json", &format!(r#"{{"kind": "range", "affected": [{}]}}"#, affected.join(",")));
    let mut c = vec![vec![0.0; 39]; 5];
    for (r, row) in c.iter_mut().enumerate() {
        row[r + 1] = 1.0;
    }
    let hyp = write(dir.path(), "h.json", &serde_json::json!({"C": c, "d": [0, 0, 0, 0, 0]}).to_string());
    let out = run(&[
        "test", "--panel", s(&renamed), "--treatment-period", "1989", "--post-periods", "12", "--structure", s(&structure),
        "--hypothesis", s(&hyp),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let parsed: TestOutput = serde_json::from_slice(&out.stdout).unwrap();
    let years: Vec<String> = parsed.tests.iter().map(|t| t.period.clone().unwrap()).collect();
    assert_eq!(years, (1989..=2000).map(|y| y.to_string()).collect::<Vec<_>>());
}

#[test]
fn replicate_table_one_schema() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("t1.json");
    let out = run(&["replicate", "--table", "1", "--cell", "10,50", "--reps", "200", "--seed", "7", "--json", s(&json)]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    assert_eq!(
        reader.headers().unwrap().iter().collect::<Vec<_>>(),
        ["table", "n", "t", "pattern", "method", "metric", "value", "se", "reps", "failures"]
    );
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    for pattern in ["none", "concentrated", "spreadout"] {
        for method in ["SCM", "SP"] {
            assert!(rows.iter().any(|r| &r[3] == pattern && &r[4] == method && &r[5] == "bias"));
        }
    }
    let parsed: ReplicateOutput = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(parsed.cells.len(), 3);
    assert_eq!(parsed.reps, 200);
}

#[test]
fn replicate_sweep_and_bad_selectors() {
    let out = run(&["replicate", "--table", "fig3", "--reps", "10", "--levels", "0,2", "--plug-in"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("level,structure,rate,se,reps\n"));
    assert_eq!(text.lines().count(), 1 + 2 * 3);

    assert_eq!(run(&["replicate", "--table", "9", "--cell", "10,50"]).status.code(), Some(2));
    assert_eq!(run(&["replicate", "--table", "1", "--cell", "10x50"]).status.code(), Some(2));
    assert_eq!(run(&["replicate", "--table", "1"]).status.code(), Some(2));
}

#[test]
fn version_flag() {
    let out = run(&["--version"]);
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("spillsynth "));
}
