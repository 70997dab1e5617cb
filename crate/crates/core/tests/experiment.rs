use dbnfilter::config::Config;
use dbnfilter::experiment::{parse_filters, run_calibration, run_compare, FilterKind, Scenario, Settings, CSV_HEADER};
use dbnfilter::{Error, Precision};

fn scenario(text: &str) -> (Scenario, Settings) {
    Scenario::from_config(Config::parse(text).unwrap()).unwrap()
}

#[test]
fn gaussian_filters_agree_on_linear_toy() {
    let (s, settings) = scenario("model = linear\nsteps = 150\nseed = 4");
    let filters = parse_filters("structured-p3,structured-p5,structured-p7,ekf,uf").unwrap();
    let out = run_compare(&s, &settings, &filters).unwrap();
    let base = &out.report.filters[0];
    for f in &out.report.filters {
        assert_eq!(f.status, "ok");
        for (var, r) in &f.rmse {
            assert!((r - base.rmse[var]).abs() < 1e-6, "{} {var}", f.name);
        }
    }
}

#[test]
fn zero_steps_gives_empty_traces() {
    let (s, settings) = scenario("steps = 0\nparticles = 10");
    let out = run_compare(&s, &settings, &parse_filters("structured,ekf,uf,pf").unwrap()).unwrap();
    assert_eq!(out.report.steps, 0);
    for r in &out.runs {
        assert_eq!(r.csv, CSV_HEADER);
        assert_eq!(r.report.steps, 0);
        assert_eq!(r.report.total_evaluations, 0);
    }
    assert!(out.failure().is_none());
}

#[test]
fn zero_seeds_gives_empty_calibration() {
    let (s, settings) = scenario("steps = 10");
    let report = run_calibration(&s, &settings, &[FilterKind::Structured], 0).unwrap();
    assert_eq!(report.filters.len(), 1);
    assert!(report.filters[0].seeds.is_empty());
    assert!(report.filters[0].focus_coverage.is_none());
}

#[test]
fn calibration_is_sorted_by_seed_and_bounded() {
    let (s, settings) = scenario("steps = 40\nseed = 10");
    let report = run_calibration(&s, &settings, &[FilterKind::StructuredP(Precision::Five)], 3).unwrap();
    let seeds: Vec<u64> = report.filters[0].seeds.iter().map(|r| r.seed).collect();
    assert_eq!(seeds, vec![10, 11, 12]);
    for r in &report.filters[0].seeds {
        assert!((0.0..=1.0).contains(&r.focus_coverage));
    }
}

#[test]
fn config_errors_are_reported() {
    let err = |t: &str| Scenario::from_config(Config::parse(t).unwrap()).unwrap_err();
    assert!(matches!(err("model = reactor"), Error::Config(m) if m.contains("unknown model")));
    assert!(matches!(err("stabilisation = 0.1"), Error::Config(m) if m.contains("unknown key")));
    assert!(matches!(err("truth.nonsense = 1"), Error::Config(_)));
    assert!(matches!(err("drop_sensors = p9"), Error::Config(_)));
    assert!(matches!(err("model = linear\ncompressor_gain = 3"), Error::Config(_)));
    assert!(parse_filters("structured-p4").is_err());
}

#[test]
fn truth_keys_change_only_the_generator() {
    let (s, _) = scenario("truth.bias_p3.initial_mean = 2\ntruth.bias_p3.initial_var = 0");
    assert_eq!(s.truth_initial.mean_of("bias_p3").unwrap(), 2.0);
    assert_eq!(s.initial.mean_of("bias_p3").unwrap(), 0.0);
    let t = s.simulate(0, 1).unwrap();
    assert_eq!(t.value(0, "bias_p3").unwrap(), 2.0);
}

#[test]
fn dropped_sensors_are_withheld() {
    let (s, settings) = scenario("drop_sensors = level_meter, recycle_meter\nsteps = 5");
    assert_eq!(settings.drop_sensors, vec!["level_meter", "recycle_meter"]);
    let t = s.simulate(0, 5).unwrap();
    let ev = s.evidence(&t, &settings.drop_sensors);
    assert!(ev
        .iter()
        .all(|e| e.len() == 7 && e.iter().all(|(n, _)| n != "level_meter")));
}
