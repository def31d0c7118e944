use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_chronofuzz"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn campaign(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["run", "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

fn column(csv_path: &Path, name: &str) -> Vec<String> {
    let mut r = csv::Reader::from_path(csv_path).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|rec| rec.unwrap()[idx].to_owned()).collect()
}

#[test]
fn minimal_config_runs_its_budget() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "seed = 3\n[budget]\nsteps = 30\n").unwrap();
    let out = tmp.path().join("camp");
    let o = run(&["run", "-c", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let line = String::from_utf8(o.stdout).unwrap();
    assert!(line.contains("steps=30") && line.contains("distinct_states=") && line.contains("findings=0"), "{line}");
    assert_eq!(column(&out.join("steps.csv"), "global_step").len(), 30);
}

#[test]
fn unknown_fault_is_a_config_error_naming_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "faults = [\"NoOp\", \"Meteor\"]\n").unwrap();
    let o = run(&["run", "-c", cfg.to_str().unwrap(), "--out", tmp.path().join("x").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("faults[1]"), "{}", stderr(&o));
}

#[test]
fn bad_values_and_fields_name_their_key() {
    let tmp = tempfile::tempdir().unwrap();
    for (body, key) in [("[learning]\ngamma = 1.5\n", "learning.gamma"), ("sed = 1\n", "sed")] {
        let cfg = tmp.path().join("c.toml");
        std::fs::write(&cfg, body).unwrap();
        let o = run(&["run", "-c", cfg.to_str().unwrap(), "--out", tmp.path().join("x").to_str().unwrap()]);
        assert_eq!(code(&o), 2);
        assert!(stderr(&o).contains(key), "{}", stderr(&o));
    }
}

#[test]
fn default_config_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["default-config"]);
    assert_eq!(code(&o), 0);
    let cfg = tmp.path().join("d.toml");
    std::fs::write(&cfg, &o.stdout).unwrap();
    let out = tmp.path().join("c");
    let o = run(&["run", "-c", cfg.to_str().unwrap(), "--budget", "12", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn baseline_actions_are_near_uniform() {
    let tmp = tempfile::tempdir().unwrap();
    let out = campaign(tmp.path(), "b", &["--baseline", "--budget", "1800", "--seed", "5"]);
    let mut counts: BTreeMap<String, f64> = BTreeMap::new();
    for a in column(&out.join("steps.csv"), "action") {
        *counts.entry(a).or_default() += 1.0;
    }
    assert_eq!(counts.len(), 9);
    let expected = 1800.0 / 9.0;
    let chi2: f64 = counts.values().map(|c| (c - expected).powi(2) / expected).sum();
    // Upper 0.1% point of chi-squared with 8 degrees of freedom.
    assert!(chi2 < 26.12, "chi2 {chi2}: {counts:?}");
}

#[test]
fn replay_passes_then_catches_tampering() {
    let tmp = tempfile::tempdir().unwrap();
    let out = campaign(tmp.path(), "g", &["--budget", "48", "--seed", "2"]);
    let o = run(&["replay", out.to_str().unwrap(), "--times", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let faults_path = out.join("faults.json");
    let mut faults: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(&faults_path).unwrap()).unwrap();
    let at = faults.iter().position(|f| f["tag"] != "NoOp").unwrap();
    faults[at] = serde_json::json!({"tag": "NoOp", "target": null});
    std::fs::write(&faults_path, serde_json::to_string(&faults).unwrap()).unwrap();
    let o = run(&["replay", out.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains(&format!("step {at}")), "{}", stderr(&o));
}

#[test]
fn replay_refuses_another_version() {
    let tmp = tempfile::tempdir().unwrap();
    let out = campaign(tmp.path(), "g", &["--budget", "12"]);
    let path = out.join("manifest.json");
    let mut m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    m["tool_version"] = "chronofuzz 0.0.1".into();
    std::fs::write(&path, m.to_string()).unwrap();
    let o = run(&["replay", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("0.0.1"), "{}", stderr(&o));
}

#[test]
fn findings_set_exit_code_four() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "seed = 0\n[budget]\nsteps = 120\n[bugs]\nmembership_rollback = true\n").unwrap();
    let out = tmp.path().join("camp");
    let o = run(&["run", "-c", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    let findings: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(out.join("findings.json")).unwrap()).unwrap();
    assert!(findings.iter().any(|f| f["kind"] == "AssertionFired"));
}

#[test]
fn replicas_run_side_by_side() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("many");
    let o = run(&["run", "--out", out.to_str().unwrap(), "--budget", "24", "--seed", "7", "--replicas", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for seed in 7..10 {
        assert!(out.join(format!("seed-{seed}")).join("steps.csv").is_file());
    }
    let single = campaign(tmp.path(), "one", &["--budget", "24", "--seed", "8"]);
    assert_eq!(
        std::fs::read(single.join("steps.csv")).unwrap(),
        std::fs::read(out.join("seed-8").join("steps.csv")).unwrap()
    );
}

#[test]
fn report_aggregates_by_hand_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let dirs = [
        campaign(tmp.path(), "g1", &["--budget", "36", "--seed", "1"]),
        campaign(tmp.path(), "g2", &["--budget", "36", "--seed", "2"]),
        campaign(tmp.path(), "r1", &["--budget", "36", "--seed", "1", "--baseline"]),
        campaign(tmp.path(), "r2", &["--budget", "36", "--seed", "2", "--baseline"]),
    ];
    let curve = |d: &PathBuf| -> Vec<u32> {
        column(&d.join("steps.csv"), "distinct_states").iter().map(|v| v.parse().unwrap()).collect()
    };
    let rep = tmp.path().join("rep");
    let mut args = vec!["report", "--out", rep.to_str().unwrap()];
    args.extend(dirs.iter().map(|d| d.to_str().unwrap()));
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv_text = std::fs::read_to_string(rep.join("curves.csv")).unwrap();

    let mut r = csv::Reader::from_reader(csv_text.as_bytes());
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 72);
    for (mode, pair) in [("guided", [&dirs[0], &dirs[1]]), ("random", [&dirs[2], &dirs[3]])] {
        let (a, b) = (curve(pair[0]), curve(pair[1]));
        for w in a.windows(2).chain(b.windows(2)) {
            assert!(w[1] >= w[0], "curves never decrease");
        }
        for row in rows.iter().filter(|r| &r[0] == mode) {
            let i: usize = row[1].parse::<usize>().unwrap() - 1;
            let mean = f64::from(a[i] + b[i]) / 2.0;
            assert_eq!(row[2].parse::<u32>().unwrap(), 2);
            assert!((row[3].parse::<f64>().unwrap() - mean).abs() < 1e-4);
            assert_eq!(row[4].parse::<u32>().unwrap(), a[i].min(b[i]));
            assert_eq!(row[5].parse::<u32>().unwrap(), a[i].max(b[i]));
        }
    }
    assert!(std::fs::read_to_string(rep.join("distinct_states.svg")).unwrap().starts_with("<svg"));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(rep.join("summary.json")).unwrap()).unwrap();
    assert!(summary["comparison"]["a12"].is_number());

    let rep2 = tmp.path().join("rep2");
    let mut args = vec!["report", "--out", rep2.to_str().unwrap()];
    args.extend(dirs.iter().rev().map(|d| d.to_str().unwrap()));
    assert_eq!(code(&run(&args)), 0);
    for f in ["curves.csv", "summary.json", "distinct_states.svg"] {
        assert_eq!(std::fs::read(rep.join(f)).unwrap(), std::fs::read(rep2.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn report_needs_campaigns() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["report", "--out", tmp.path().join("r").to_str().unwrap(), tmp.path().join("missing").to_str().unwrap()]);
    assert_ne!(code(&o), 0);
    let o = run(&["report", "--out", "x"]);
    assert_ne!(code(&o), 0);
}

#[test]
fn calibrate_writes_a_usable_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cal.toml");
    let o = run(&["calibrate", "--windows", "24", "--write", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let line = String::from_utf8(o.stdout).unwrap();
    assert!(line.starts_with("epsilon="), "{line}");
    let text = std::fs::read_to_string(&cfg).unwrap();
    assert!(text.contains("epsilon"));
    let o = run(&["calibrate", "--windows", "5"]);
    assert_ne!(code(&o), 0);
}
