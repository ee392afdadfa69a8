use std::path::Path;
use std::process::{Command, Output};
use tempfile::TempDir;

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lymphosim"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Data rows of a CSV written by the tool, split into fields.
fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn grow_detects_both_clones() {
    let dir = TempDir::new().unwrap();
    for (origin, lo, hi) in [("pro-b", 145.0, 155.0), ("pre-b", 218.0, 228.0)] {
        let out = dir.path().join(origin);
        let o = run(&out, &["--origin", origin, "grow"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let day = json(&out.join("grow_summary.json"))["detection_day"].as_f64().unwrap();
        assert!((lo..=hi).contains(&day), "{origin}: {day}");
        let csv = std::fs::read_to_string(out.join("growth_trace.csv")).unwrap();
        let first = csv.lines().next().unwrap();
        assert!(first.starts_with("# lymphosim ") && first.contains("seed=0") && first.contains("params_sha256="));
    }
}

#[test]
fn config_errors_exit_with_2() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("absent.json");
    let o = run(dir.path(), &["--params", missing.to_str().unwrap(), "grow"]);
    assert_eq!(o.status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"c0\": 1e7,}").unwrap();
    let o = run(dir.path(), &["--params", bad.to_str().unwrap(), "grow"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.json:1:"));

    assert_eq!(run(dir.path(), &["--rel-tol", "-1", "grow"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["sobol", "--samples", "100"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["sobol", "--qoi", "blasts"]).status.code(), Some(2));
}

#[test]
fn integrator_breakdown_exits_with_3() {
    let dir = TempDir::new().unwrap();
    let o = run(dir.path(), &["--rel-tol", "1e-30", "--abs-tol", "1e-300", "grow"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn treat_classifies_reference_and_minimal_influences() {
    let dir = TempDir::new().unwrap();
    let reference = dir.path().join("ref");
    assert!(run(&reference, &["treat"]).status.success());
    let r = json(&reference.join("response.json"));
    assert_eq!(r["response"]["overall"], "Responder");

    let minimal = dir.path().join("min");
    let o = run(&minimal, &["treat", "--deltas", "0.016666666666666666,0.6666666666666666,0.03333333333333333,0.0001"]);
    assert!(o.status.success());
    assert_eq!(json(&minimal.join("response.json"))["response"]["overall"], "NonResponder");
}

#[test]
fn mu_jumps_once_per_dose_day() {
    let dir = TempDir::new().unwrap();
    assert!(run(dir.path(), &["treat", "--follow-up", "0"]).status.success());
    let t_start = json(&dir.path().join("response.json"))["t_start"].as_f64().unwrap();
    let rows = csv_rows(&dir.path().join("treatment_trace.csv"));
    let mu: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (r[0].parse().unwrap(), r[5].parse().unwrap()))
        .filter(|(t, _)| *t >= t_start)
        .collect();
    let jumps = mu.windows(2).filter(|w| w[1].1 > w[0].1).count();
    // Prednisone is given daily on days 1..=37 and the other drugs only on
    // some of those days, so there are 37 distinct dose days.
    let dose_days = 37;
    // The day-1 dose lands on the first sample itself.
    assert_eq!(jumps + 1, dose_days);
}

#[test]
fn stability_has_one_stable_row() {
    let dir = TempDir::new().unwrap();
    assert!(run(dir.path(), &["stability"]).status.success());
    let rows = csv_rows(&dir.path().join("stability.csv"));
    assert_eq!(rows.len(), 6);
    let stable: Vec<_> = rows.iter().filter(|r| r.last().unwrap() == "Stable").collect();
    assert_eq!(stable.len(), 1);
    assert_eq!(stable[0][0], "P_L5");
}

#[test]
fn sweep_reports_threshold_near_point_zero_nine() {
    let dir = TempDir::new().unwrap();
    assert!(run(dir.path(), &["sweep"]).status.success());
    let s = json(&dir.path().join("sweep_summary.json"));
    let t = s["threshold_delta"].as_f64().unwrap();
    assert!((t - 0.09).abs() < 0.01, "{t}");
    assert_eq!(csv_rows(&dir.path().join("sweep.csv")).len(), 50);
}

#[test]
fn heatmap_has_441_rows() {
    let dir = TempDir::new().unwrap();
    assert!(run(dir.path(), &["--threads", "1", "heatmap"]).status.success());
    assert_eq!(csv_rows(&dir.path().join("heatmap.csv")).len(), 441);
    let s = json(&dir.path().join("heatmap_summary.json"));
    assert_eq!((s["responder_regions"].as_u64(), s["nonresponder_regions"].as_u64()), (Some(1), Some(1)));
}

#[test]
fn sobol_is_byte_identical_for_a_fixed_seed() {
    let dir = TempDir::new().unwrap();
    let args = ["--seed", "5", "sobol", "--samples", "64", "--bootstrap", "10", "--qoi", "log10_leukemic_day15"];
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run(&a, &args).status.success());
    assert!(run(&b, &args).status.success());
    for f in ["sobol.csv", "sobol_summary.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn custom_params_and_protocol_files_are_used() {
    let dir = TempDir::new().unwrap();
    let params = dir.path().join("p.json");
    // A larger starting clone is detected sooner.
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../core/data/params.json"))
        .unwrap()
        .replace("\"L\": 1.0", "\"L\": 1000.0");
    std::fs::write(&params, text).unwrap();
    let out = dir.path().join("o");
    assert!(run(&out, &["--params", params.to_str().unwrap(), "grow"]).status.success());
    let day = json(&out.join("grow_summary.json"))["detection_day"].as_f64().unwrap();
    assert!(day < 145.0, "{day}");

    let protocol = dir.path().join("proto.json");
    std::fs::write(&protocol, "{\"name\": \"x\"}").unwrap();
    assert_eq!(run(&out, &["--protocol", protocol.to_str().unwrap(), "treat"]).status.code(), Some(2));
}

#[test]
fn deltas_need_four_values() {
    let dir = TempDir::new().unwrap();
    assert_eq!(run(dir.path(), &["treat", "--deltas", "0.1,2"]).status.code(), Some(2));
}
