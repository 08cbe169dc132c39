use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn ridenet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ridenet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(args: &[&str]) -> String {
    let out = ridenet(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Splits off and parses the manifest line.
fn split(text: &str) -> (Value, Vec<Vec<String>>) {
    let (first, rest) = text.split_once('\n').unwrap();
    let json = first.strip_prefix("# manifest: ").expect("manifest line");
    let manifest = serde_json::from_str(json).unwrap();
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(rest.as_bytes());
    let rows = reader
        .records()
        .map(|r| r.unwrap().iter().map(String::from).collect())
        .collect();
    (manifest, rows)
}

fn column(rows: &[Vec<String>], name: &str) -> Vec<String> {
    let k = rows[0].iter().position(|h| h == name).unwrap();
    rows[1..].iter().map(|r| r[k].clone()).collect()
}

fn num(s: &str) -> f64 {
    s.parse().unwrap()
}

fn optimize_value(rows: &[Vec<String>]) -> f64 {
    num(&rows.iter().find(|r| r[1] == "value").unwrap()[4])
}

#[test]
fn manifest_describes_the_run() {
    let text = stdout(&["simulate", "builtin:two_region", "--n", "20", "--horizon", "50", "--seed", "7", "--reps", "2"]);
    let (m, rows) = split(&text);
    assert_eq!(m["command"], "simulate");
    assert_eq!(m["scenario"], "builtin:two_region");
    assert_eq!(m["seeds"], serde_json::json!([7, 8]));
    assert_eq!(m["parameters"]["policy"], "static");
    assert_eq!(m["parameters"]["n"], 20);
    assert_eq!(m["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(rows[0], ["region", "requests", "fulfilled", "fraction", "half_width"]);
}

#[test]
fn every_command_emits_a_manifest() {
    let runs: [&[&str]; 8] = [
        &["optimize", "builtin:two_region"],
        &["mva", "builtin:two_region", "--n-list", "5"],
        &["simulate", "builtin:two_region", "--n", "5", "--horizon", "10", "--reps", "1"],
        &["compare", "builtin:two_region", "--n-list", "5", "--policies", "sw", "--seeds", "1", "--horizon", "10"],
        &["lookahead-eval", "builtin:five_region_city", "--n", "30", "--seeds", "1"],
        &["robustness", "builtin:two_region", "--sigma-list", "0.1", "--reps", "3"],
        &["fleet-size", "builtin:two_region"],
        &["fluid", "builtin:two_region", "--t-end", "1"],
    ];
    for args in runs {
        let (m, rows) = split(&stdout(args));
        assert_eq!(m["command"], args[0]);
        assert!(rows.len() > 1, "{args:?}");
    }
}

#[test]
fn simulation_is_reproducible() {
    let args = ["simulate", "builtin:nine_region_didi", "--policy", "jlcr:0.5", "--n", "40", "--horizon", "30", "--reps", "3"];
    assert_eq!(stdout(&args), stdout(&args));
}

#[test]
fn two_region_optimum() {
    let (_, rows) = split(&stdout(&["optimize", "builtin:two_region"]));
    assert!((optimize_value(&rows) - 5.0 / 6.0).abs() < 1e-9);
    for i in ["1", "2"] {
        let sum: f64 = rows
            .iter()
            .filter(|r| r[1] == "q" && r[2] == i)
            .map(|r| num(&r[4]))
            .sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
}

#[test]
fn optimize_out_files_feed_mva() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("run");
    let prefix = prefix.to_str().unwrap();
    let printed = stdout(&["optimize", "builtin:two_region", "--out", prefix]);
    assert!(printed.is_empty());
    let solution = std::fs::read_to_string(format!("{prefix}.solution.csv")).unwrap();
    let (m, _) = split(&solution);
    assert_eq!(m["outputs"].as_array().unwrap().len(), 2);
    let q_path = format!("{prefix}.q.csv");
    assert!(Path::new(&q_path).exists());
    let from_file = stdout(&["mva", "builtin:two_region", "--q", &q_path, "--n-list", "1,50"]);
    let optimal = stdout(&["mva", "builtin:two_region", "--q", "optimal", "--n-list", "1,50"]);
    assert_eq!(split(&from_file).1, split(&optimal).1);
}

#[test]
fn scenario_file_matches_builtin() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("didi.json");
    let sc = ridenet::builtin_scenario("nine_region_didi").unwrap();
    ridenet::model::save_scenario(&sc, None, &path).unwrap();
    let (_, a) = split(&stdout(&["optimize", path.to_str().unwrap()]));
    let (_, b) = split(&stdout(&["optimize", "builtin:nine_region_didi"]));
    assert_eq!(a, b);
}

#[test]
fn mva_single_car_and_monotone_sweep() {
    let (_, rows) = split(&stdout(&["mva", "builtin:two_region", "--n-list", "1,10,100,1000"]));
    let a: Vec<f64> = column(&rows, "availability").iter().map(|s| num(s)).collect();
    assert_eq!(a.len(), 8);
    for i in 0..2 {
        let curve: Vec<f64> = a.iter().skip(i).step_by(2).copied().collect();
        assert!(curve.windows(2).all(|w| w[1] >= w[0]), "{curve:?}");
    }
    assert!(a[0] > 0.0 && a[1] > 0.0 && a[0] + a[1] < 1.0);
}

#[test]
fn zero_cars_lose_every_request() {
    let (_, rows) = split(&stdout(&["simulate", "builtin:two_region", "--n", "0", "--horizon", "20", "--reps", "2"]));
    let last = rows.last().unwrap();
    assert_eq!(last[0], "utility");
    assert_eq!(last[2], "0");
    assert_eq!(num(&last[3]), 0.0);
}

#[test]
fn compare_reports_fluid_bound() {
    let (_, rows) = split(&stdout(&[
        "compare", "builtin:two_region", "--n-list", "10,60", "--seeds", "2", "--horizon", "100",
    ]));
    let policies = column(&rows, "policy");
    let utility: Vec<f64> = column(&rows, "utility").iter().map(|s| num(s)).collect();
    assert_eq!(policies.iter().filter(|p| *p == "fluid_lp").count(), 2);
    for eta in ["jlcr:0", "jlcr:0.25", "jlcr:0.5", "jlcr:0.75", "jlcr:1", "static", "sw"] {
        assert!(policies.iter().any(|p| p == eta), "{eta}");
    }
    let bound = utility[0];
    assert!((bound - 5.0 / 6.0).abs() < 1e-9);
    assert!(utility.iter().all(|u| (0.0..=1.0).contains(u)));
}

#[test]
fn robustness_without_noise_is_the_optimum() {
    let (_, opt) = split(&stdout(&["optimize", "builtin:nine_region_didi"]));
    let (_, rows) = split(&stdout(&["robustness", "builtin:nine_region_didi", "--sigma-list", "0", "--reps", "4"]));
    assert!((num(&column(&rows, "mean")[0]) - optimize_value(&opt)).abs() < 1e-9);
    assert!(num(&column(&rows, "std")[0]) < 1e-9);
}

#[test]
fn fleet_size_two_region() {
    let (_, rows) = split(&stdout(&["fleet-size", "builtin:two_region"]));
    let get = |k: &str| rows.iter().find(|r| r[1] == k).unwrap()[4].clone();
    assert!((num(&get("kappa")) - 4.0 / 3.0).abs() < 1e-9);
    assert_eq!(get("verdict"), "undersupplied");
    assert_eq!(get("triangle_ok"), "true");
}

#[test]
fn fluid_from_equilibrium_stays_put() {
    let (_, rows) = split(&stdout(&["fluid", "builtin:nine_region_didi", "--init", "equilibrium", "--t-end", "5"]));
    for d in column(&rows, "distance") {
        assert!(num(&d) < 1e-9, "{d}");
    }
}

#[test]
fn fluid_from_one_region_converges() {
    let (_, rows) = split(&stdout(&["fluid", "builtin:two_region", "--init", "idle:1", "--t-end", "30"]));
    for m in column(&rows, "mass") {
        assert!((num(&m) - 1.0).abs() < 1e-6);
    }
    let v: Vec<f64> = column(&rows, "V").iter().map(|s| num(s)).collect();
    assert!(v.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    assert!(v.last().unwrap() < &1e-3);
}

#[test]
fn lookahead_eval_reports_bins_and_totals() {
    let (_, rows) = split(&stdout(&[
        "lookahead-eval", "builtin:five_region_city", "--T-list", "0.25,0.5", "--n", "100", "--seeds", "2",
    ]));
    let policies = column(&rows, "policy");
    let bins = column(&rows, "bin");
    for p in ["standard", "lookahead:0.25", "lookahead:0.5"] {
        assert_eq!(policies.iter().zip(&bins).filter(|(q, b)| *q == p && *b == "total").count(), 1);
    }
    assert!(bins.iter().filter(|b| *b != "total").count() >= 3);
}

fn code(args: &[&str]) -> i32 {
    ridenet(args).status.code().unwrap()
}

#[test]
fn exit_codes() {
    assert_eq!(code(&["optimize", "builtin:nowhere"]), 2);
    assert_eq!(code(&["simulate", "builtin:two_region", "--policy", "jlcr:1.5"]), 2);
    assert_eq!(code(&["mva", "builtin:five_region_city"]), 2);
    assert_eq!(code(&["lookahead-eval", "builtin:two_region"]), 2);
    assert_eq!(code(&["robustness", "builtin:two_region", "--sigma-list", "1.5", "--reps", "2"]), 2);
    assert_eq!(code(&["fluid", "builtin:two_region", "--init", "idle:3"]), 2);
    assert_eq!(code(&["optimize", "/nonexistent/scenario.json"]), 2);

    let dir = tempfile::tempdir().unwrap();
    let q = dir.path().join("q.csv");
    std::fs::write(&q, "1,0\n1,0\n").unwrap();
    assert_eq!(code(&["mva", "builtin:two_region", "--q", q.to_str().unwrap()]), 3);
    assert_eq!(code(&["fluid", "builtin:two_region", "--dt", "2", "--t-end", "10"]), 4);
}
