use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn odcal(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_odcal"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("ODCAL_OUT_DIR")
        .env_remove("ODCAL_WORKERS")
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = odcal(out, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn column(path: &Path, name: &str) -> Vec<f64> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|rec| rec.unwrap()[idx].parse().unwrap()).collect()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn corridor_generate_shape_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let path = scenario("corridor.toml");
    ok(&a, &["generate", path.to_str().unwrap(), "--seed", "3"]);
    ok(&b, &["generate", path.to_str().unwrap(), "--seed", "3"]);
    for file in ["demand.csv", "counts.csv", "travel_times.csv"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
    let counts = column(&a.join("counts.csv"), "count");
    assert_eq!(counts.len(), 8 * 60);
    let mut r = csv::Reader::from_path(a.join("counts.csv")).unwrap();
    let sensors: std::collections::BTreeSet<String> = r.records().map(|rec| rec.unwrap()[1].to_string()).collect();
    assert_eq!(sensors.len(), 8);
}

#[test]
fn worker_count_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    let path = scenario("delay_shared_link.toml");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&a, &["--workers", "1", "calibrate", path.to_str().unwrap()]);
    ok(&b, &["--workers", "3", "calibrate", path.to_str().unwrap()]);
    for file in ["estimates.csv", "predictions.csv", "metrics.csv", "noise.csv"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn zero_demand_counts_nothing() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["generate", scenario("zero_demand.toml").to_str().unwrap()]);
    let counts = column(&dir.path().join("counts.csv"), "count");
    assert_eq!(counts.len(), 8 * 12);
    assert!(counts.iter().all(|c| *c == 0.0));
}

#[test]
fn schema_errors_exit_with_input_code_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "name = \"x\"\n\n[network]\nkind = \"corridor\"\n\n[horizon]\nintervls = 3\n").unwrap();
    let o = odcal(dir.path(), &["generate", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 7"), "{err}");
    assert!(err.contains("intervls"), "{err}");

    fs::write(&bad, "name = \"x\"\n[network]\nkind = \"corridor\"\n[demand]\ngenerators = [{ base = 1.0 }]\n").unwrap();
    let o = odcal(dir.path(), &["generate", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("schema error"));
}

#[test]
fn missing_file_exits_with_io_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = odcal(dir.path(), &["generate", dir.path().join("none.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(5));
}

#[test]
fn linear_surrogate_fd_and_psp_agree() {
    let dir = tempfile::tempdir().unwrap();
    let path = scenario("linear.toml");
    let (fd, psp) = (dir.path().join("fd"), dir.path().join("psp"));
    ok(&fd, &["calibrate", path.to_str().unwrap(), "--gradient", "fd"]);
    ok(&psp, &["calibrate", path.to_str().unwrap(), "--gradient", "psp"]);
    let a = column(&fd.join("estimates.csv"), "estimated");
    let b = column(&psp.join("estimates.csv"), "estimated");
    assert_eq!(a.len(), 4 * 12);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
    }

    let m = json(&psp.join("manifest.json"));
    let e = &m["evaluation"];
    let p = e["parameter_groups"].as_u64().unwrap();
    assert!(p < 4, "coloring should merge ODs, got {p}");
    assert_eq!(e["evaluations_per_sweep"].as_u64().unwrap(), 2 * p);
    assert_eq!(e["fd_evaluations_per_sweep"].as_u64().unwrap(), 8);
    let sweeps = e["sweeps"].as_u64().unwrap();
    assert!(sweeps > 0);
    assert_eq!(e["gradient_evaluations"].as_u64().unwrap(), sweeps * 2 * p);
    let per_interval: u64 = m["records"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["counters"]["gradient_evaluations"].as_u64().unwrap())
        .sum();
    assert_eq!(per_interval, sweeps * 2 * p);
}

#[test]
fn observed_file_matches_generated_day() {
    let dir = tempfile::tempdir().unwrap();
    let path = scenario("delay_origin_links.toml");
    let data = dir.path().join("data");
    ok(&data, &["generate", path.to_str().unwrap(), "--seed", "4"]);
    let (from_seed, from_file) = (dir.path().join("seed"), dir.path().join("file"));
    ok(&from_seed, &["calibrate", path.to_str().unwrap(), "--seed", "4"]);
    ok(
        &from_file,
        &[
            "calibrate",
            path.to_str().unwrap(),
            "--observed",
            data.join("counts.csv").to_str().unwrap(),
            "--demand",
            data.join("demand.csv").to_str().unwrap(),
        ],
    );
    for col in ["estimated", "true", "historical"] {
        let a = column(&from_seed.join("estimates.csv"), col);
        let b = column(&from_file.join("estimates.csv"), col);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-6 * (1.0 + x.abs()), "{col}: {x} vs {y}");
        }
    }
}

#[test]
fn metrics_command_reproduces_run_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    ok(&run, &["calibrate", scenario("delay_shared_link.toml").to_str().unwrap(), "--degree", "1"]);
    let again = dir.path().join("again");
    ok(&again, &["metrics", run.to_str().unwrap()]);
    assert_eq!(
        fs::read_to_string(run.join("metrics.csv")).unwrap(),
        fs::read_to_string(again.join("metrics.csv")).unwrap()
    );
    let m = json(&run.join("manifest.json"));
    assert_eq!(m["config"]["filter"]["degree"], 1);
    assert_eq!(m["records"].as_array().unwrap().len(), 12);
}

#[test]
fn color_command() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (
            "cyclic.txt",
            "incidence 6 6\n0: 0 1 5\n1: 0 1 2\n2: 1 2 3\n3: 2 3 4\n4: 3 4 5\n5: 0 4 5\n",
            3,
        ),
        ("identity.txt", "incidence 3 3\n0: 0\n1: 1\n2: 2\n", 1),
        ("dense.txt", "incidence 1 8\n0: 0 1 2 3 4 5 6 7\n", 8),
    ];
    for (file, text, colors) in cases {
        let path = dir.path().join(file);
        fs::write(&path, text).unwrap();
        let out = dir.path().join(file.replace(".txt", ""));
        ok(&out, &["color", path.to_str().unwrap(), "--starts", "30", "--seed", "5"]);
        let report = json(&out.join("color_report.json"));
        assert_eq!(report["colors"], colors, "{file}");
        assert!(fs::read_to_string(out.join("coloring.txt")).unwrap().starts_with("coloring "));
    }
    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "incidence 2 2\n0: 0 7\n").unwrap();
    assert_eq!(odcal(dir.path(), &["color", bad.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn observability_command() {
    let dir = tempfile::tempdir().unwrap();
    for (file, expected) in [("delay_origin_links.toml", [2.0, 2.0, 2.0]), ("delay_shared_link.toml", [1.0, 2.0, 2.0])] {
        let out = dir.path().join(file);
        ok(&out, &["observability", scenario(file).to_str().unwrap(), "--max-degree", "3"]);
        assert_eq!(column(&out.join("observability.csv"), "distinguishable"), expected);
    }
}
