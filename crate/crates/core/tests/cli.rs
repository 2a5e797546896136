use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_oppsched"));
    c.env("OPPSCHED_THREADS", "2");
    c
}

fn config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/cdma_table1.json")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// Manifest line, header, rows.
fn parse_csv(text: &str) -> (Value, Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines();
    let m = lines.next().unwrap().strip_prefix("# manifest: ").expect("manifest line");
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines
        .map(|l| {
            // only the tie column may be quoted
            let mut out = Vec::new();
            let mut cur = String::new();
            let mut quoted = false;
            for ch in l.chars() {
                match ch {
                    '"' => quoted = !quoted,
                    ',' if !quoted => out.push(std::mem::take(&mut cur)),
                    _ => cur.push(ch),
                }
            }
            out.push(cur);
            out
        })
        .collect();
    (serde_json::from_str(m).unwrap(), header, rows)
}

#[test]
fn validate_accepts_bundled_config() {
    let o = run(&["validate", config().to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "valid: 2 classes, rho = 0.85");
}

#[test]
fn validate_lists_every_violation() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(
        &p,
        r#"{"classes": [{"lambda": -1, "q": [0.5, 0.4], "mu": [0.3, 0.2]}]}"#,
    )
    .unwrap();
    let o = run(&["validate", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    for needle in ["sum to 1", "nondecreasing", "lambda"] {
        assert!(err.contains(needle), "{err}");
    }
}

#[test]
fn exit_codes() {
    let c = config();
    let c = c.to_str().unwrap();
    assert_eq!(run(&["drift", c, "--policy", "nope"]).status.code(), Some(2));
    assert_eq!(run(&["drift", c, "--policy", "sb", "--tie", "random:1"]).status.code(), Some(2));
    assert_eq!(run(&["validate", "/nonexistent/x.json"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["stability", c, "--policy", "cmu", "--sweep", "lambda9:0:1"]).status.code(), Some(2));
    // class 2 saturated at this load has no stationary law under SB
    let dir = tempfile::tempdir().unwrap();
    let over = dir.path().join("over.json");
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(c).unwrap()).unwrap();
    v["classes"][0]["lambda"] = 0.24.into();
    std::fs::write(&over, v.to_string()).unwrap();
    let o = run(&["drift", over.to_str().unwrap(), "--policy", "sb", "--sat", "2"]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn drift_csv_layout() {
    let o = run(&["drift", config().to_str().unwrap(), "--policy", "pi", "--sat", "2"]);
    assert!(o.status.success());
    let (m, header, rows) = parse_csv(&stdout(&o));
    assert_eq!(m["command"], "drift");
    assert_eq!(m["config"]["classes"][0]["lambda"], 0.14);
    assert_eq!(header[..5], ["policy", "tie", "U", "class", "delta_tilde"]);
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][2], "{1}");
    assert_eq!(rows[1][4], "-0.015");
}

#[test]
fn control_and_fluid_agree_for_pi() {
    let c = config();
    let c = c.to_str().unwrap();
    let ctl = stdout(&run(&["control", c, "--x0", "1,1"]));
    let fl = stdout(&run(&["fluid", c, "--policy", "pi", "--x0", "1,1"]));
    assert!(ctl.contains("3.84615385") && ctl.contains("83.3333333"), "{ctl}");
    assert!(fl.contains("3.84615385") && fl.contains("83.3333333"), "{fl}");
}

#[test]
fn simulate_is_seed_deterministic() {
    let c = config();
    let c = c.to_str().unwrap();
    let args = ["simulate", c, "--policy", "pb", "--r", "100", "--horizon", "10", "--seed", "5"];
    let (a, b) = (run(&args), run(&args));
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let (_, header, rows) = parse_csv(&stdout(&a));
    assert_eq!(header[0], "t");
    assert!(rows.len() > 900);
}

#[test]
fn preset_files_are_reproducible_from_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let run_into = |sub: &str| -> PathBuf {
        let d = dir.path().join(sub);
        let o = run(&["preset", "fig3c", "--r", "50", "--horizon", "5", "--out-dir", d.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        d
    };
    let (a, b) = (run_into("a"), run_into("b"));
    let mut names: Vec<_> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 11);
    for n in &names {
        assert_eq!(
            std::fs::read(a.join(n)).unwrap(),
            std::fs::read(b.join(n)).unwrap(),
            "{n:?}"
        );
    }
    // the manifest carries every override and the resolved parameters
    let text = std::fs::read_to_string(a.join("fig3c_trajectory_pi.csv")).unwrap();
    let (m, _, _) = parse_csv(&text);
    assert_eq!(m["command"], "preset fig3c");
    assert_eq!(m["params"]["overrides"]["r"], 50.0);
    assert_eq!(m["params"]["resolved"]["lambda1"], 0.24);
    assert_eq!(m["config"]["seed"], 1);
}

#[test]
fn table_presets_write_expected_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert!(run(&["preset", "table1-check", "--out-dir", d]).status.success());
    let (_, header, rows) = parse_csv(&std::fs::read_to_string(dir.path().join("table1_check.csv")).unwrap());
    assert_eq!(header, ["class", "state", "rate_kbps", "mu_derived", "mu_table", "q"]);
    assert_eq!(rows.len(), 18);
    for r in rows.iter().filter(|r| r[5] != "0") {
        let (a, b): (f64, f64) = (r[3].parse().unwrap(), r[4].parse().unwrap());
        assert!((a - b).abs() < 1e-3, "{r:?}");
    }
    assert!(run(&["preset", "table3", "--out-dir", d]).status.success());
    let (_, _, rows) = parse_csv(&std::fs::read_to_string(dir.path().join("table3.csv")).unwrap());
    let sb1: Vec<_> = rows.iter().filter(|r| r[0] == "sb" && r[2] == "{1}").collect();
    assert!(sb1.iter().all(|r| r[4] == "nan" && r[5] == "not_ergodic"));
}
