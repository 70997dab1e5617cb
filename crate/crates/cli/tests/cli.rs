use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dbnfilter"))
        .args(args)
        .output()
        .unwrap()
}

fn read_dir(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .filter(|(name, _)| name != "timing.json")
        .collect();
    files.sort();
    files
}

#[test]
fn repeated_runs_are_byte_identical() {
    let cfg_dir = tempfile::tempdir().unwrap();
    let cfg = cfg_dir.path().join("run.cfg");
    fs::write(
        &cfg,
        "# plant with a misconfigured level gauge\nlevel_meter.noise_var = 0.01\n",
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    for cmd in [
        vec!["simulate", "--steps", "30"],
        vec!["track", "--steps", "30", "--precision", "5"],
        vec![
            "compare",
            "--steps",
            "30",
            "--particles",
            "300",
            "--filters",
            "structured-p3,structured-p7,ekf,uf,pf",
        ],
        vec![
            "calibrate",
            "--steps",
            "20",
            "--seeds",
            "2",
            "--filters",
            "structured,pf",
            "--particles",
            "100",
        ],
    ] {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for dir in [&a, &b] {
            let mut args = cmd.clone();
            args.extend(["--config", cfg, "--seed", "7", "--out", dir.path().to_str().unwrap()]);
            let out = run(&args);
            assert!(
                out.status.success(),
                "{cmd:?}: {}",
                String::from_utf8_lossy(&out.stderr)
            );
        }
        let (fa, fb) = (read_dir(a.path()), read_dir(b.path()));
        assert!(!fa.is_empty());
        assert_eq!(fa, fb, "{cmd:?}");
    }
}

#[test]
fn compare_writes_one_trace_per_filter() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = run(&["compare", "--steps", "5", "--particles", "50", "--out", d]);
    assert!(out.status.success());
    for f in [
        "truth.csv",
        "structured-p3.csv",
        "ekf.csv",
        "uf.csv",
        "pf.csv",
        "report.json",
        "timing.json",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let csv = fs::read_to_string(dir.path().join("ekf.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,variable,truth,estimate,std"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "1");
    // 17 significant digits
    assert_eq!(row[2].split('e').next().unwrap().trim_start_matches('-').len(), 18);
}

#[test]
fn zero_steps_succeeds_with_empty_traces() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "compare",
        "--steps",
        "0",
        "--filters",
        "structured-p3,pf",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let csv = fs::read_to_string(dir.path().join("pf.csv")).unwrap();
    assert_eq!(csv, "step,variable,truth,estimate,std\n");
    let report = fs::read_to_string(dir.path().join("report.json")).unwrap();
    assert!(report.contains("\"steps\": 0"));
}

#[test]
fn zero_seeds_succeeds_with_empty_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["calibrate", "--seeds", "0", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success());
    let report = fs::read_to_string(dir.path().join("calibration.json")).unwrap();
    assert!(report.contains("\"seeds\": []"));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert_eq!(
        run(&["compare", "--filters", "kalman", "--out", d]).status.code(),
        Some(2)
    );
    assert_eq!(run(&["track", "--precision", "4", "--out", d]).status.code(), Some(2));
    assert_eq!(
        run(&["track", "--drop-sensors", "p9", "--out", d]).status.code(),
        Some(2)
    );
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "model = reactor\n").unwrap();
    let out = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", d]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown model"));
}

#[test]
fn runtime_failure_exits_with_one_and_names_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("diverge.cfg");
    // the generator gets the default budget; the filter's model too few iterations
    fs::write(&cfg, "fixed_point_max_iter = 10\ntruth.fixed_point_max_iter = 500\n").unwrap();
    let out = run(&[
        "compare",
        "--filters",
        "structured",
        "--steps",
        "3",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("structured-p3: at step 1"), "{err}");
    let report = fs::read_to_string(dir.path().join("report.json")).unwrap();
    assert!(report.contains("\"failed_step\": 1"));
}

#[test]
fn quadtest_prints_passing_table() {
    let out = run(&["quadtest"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.matches("pass").count(), 14);
    assert!(!text.contains("FAIL"));
}
