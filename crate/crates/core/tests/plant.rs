use dbnfilter::config::Config;
use dbnfilter::model::{forward_sample, Trajectory};
use dbnfilter::plant::{
    build_plant_model, fit_parameters, initial_belief, schedule, FitTarget, PlantConfig, COMPOSITIONS, DUMP, Z,
};
use dbnfilter::{Cpd, Error, Modes};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn with(lines: &str) -> PlantConfig {
    let mut cfg = PlantConfig::default();
    let mut c = Config::parse(lines).unwrap();
    cfg.apply(&mut c).unwrap();
    c.finish().unwrap();
    cfg
}

fn simulate(cfg: &PlantConfig, steps: usize, seed: u64) -> Trajectory {
    let m = build_plant_model(cfg).unwrap();
    let init = initial_belief(cfg).unwrap();
    forward_sample(&m, &init, &schedule(cfg, steps), steps, seed).unwrap()
}

const QUIET: &str = "
composition_noise_var = 0
membrane_drift_var = 0
membrane_reversion = 0
supply_noise_var = 0
temperature_noise_var = 0
conversion_noise_var = 0
water_noise_var = 0
level_noise_var = 0
pressure_noise_var = 0
recycle_noise_var = 0
vent_noise_var = 0
feed_noise_var = 0
dp_noise_var = 0
";

#[test]
fn compositions_stay_on_the_simplex() {
    let t = simulate(&PlantConfig::default(), 500, 4);
    for k in 0..=500 {
        let c: Vec<f64> = COMPOSITIONS.iter().map(|n| t.value(k, n).unwrap()).collect();
        assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-6, "step {k}: {c:?}");
        assert!(c.iter().all(|v| (0.0..=1.0).contains(v)), "step {k}: {c:?}");
    }
}

#[test]
fn stabilization_limits_hydrogen_drift() {
    let spread = |cfg: &PlantConfig| {
        let v: Vec<f64> = (0..50)
            .map(|s| simulate(cfg, 500, 100 + s).value(500, "c_h2").unwrap())
            .collect();
        let m = v.iter().sum::<f64>() / 50.0;
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 49.0).sqrt()
    };
    let stabilized = spread(&PlantConfig::default());
    let free = spread(&with("stabilization = 0"));
    assert!(free > stabilized, "s=0: {free}, s=0.02: {stabilized}");
}

#[test]
fn dump_drops_pressure_then_relaxes() {
    let cfg = with(QUIET);
    let t = simulate(&cfg, 140, 1);
    let dump_step = (1..=140).find(|&k| t.modes[k - 1].get(DUMP) != 0).unwrap();
    let p = |k: usize| t.value(k, "pressure").unwrap();
    let before = p(dump_step - 1);
    let drop = before - p(dump_step);
    assert!(
        drop > 0.5 * cfg.dump_pressure && drop <= cfg.dump_pressure,
        "drop {drop}"
    );
    let gap = |k: usize| (before - p(k)).abs();
    // the compressor switches to low speed 20 steps after the dump
    for k in dump_step + 1..dump_step + 15 {
        assert!(gap(k) < gap(k - 1), "pressure must recover monotonically (step {k})");
    }
    assert!(gap(dump_step + 15) < 0.05 * drop);
}

#[test]
fn fixed_point_converges_quickly_from_nominal() {
    let cfg = PlantConfig::default();
    let m = build_plant_model(&cfg).unwrap();
    let fp = m
        .nodes
        .iter()
        .find_map(|n| match &n.cpd {
            Cpd::FixedPoint(f) => Some(f),
            _ => None,
        })
        .unwrap();
    assert_eq!(fp.nominal.len(), Z.len());
    let nominal_inputs = |name: &str| -> f64 {
        match name {
            "c_h2" => cfg.h2_target,
            "c_co2" => cfg.co2_nominal(),
            "c_co" => cfg.co_nominal,
            "supply" => cfg.supply_nominal,
            "k_co" => cfg.k_co,
            "k_h2" => cfg.k_h2,
            "pressure" => fp.nominal[0],
            other => panic!("unexpected fixed-point input {other}"),
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for trial in 0..200 {
        let inputs: Vec<f64> = fp
            .inputs
            .iter()
            .map(|i| nominal_inputs(i.name()) * rng.random_range(0.9..1.1))
            .collect();
        let modes = if trial % 2 == 0 {
            Modes::new()
        } else {
            Modes::new().with(DUMP, 1)
        };
        let mut z = fp.nominal.clone();
        let sol = fp.solve(&inputs, &modes, &mut z).unwrap();
        assert!(sol.iterations < 50, "{} iterations", sol.iterations);
        assert!(sol.residual < 1e-8);
    }
}

#[test]
fn noiseless_fit_recovers_constants_exactly() {
    let cfg = with(QUIET);
    // membrane constants are held at their initial draw
    let t = [simulate(&cfg, 300, 2)];
    let (k_co, k_h2) = (t[0].value(0, "k_co").unwrap(), t[0].value(0, "k_h2").unwrap());
    let fit = fit_parameters(&t, FitTarget::Compressor).unwrap();
    assert!(
        (fit.estimates[0] - cfg.compressor_gain).abs() < 1e-8,
        "{:?}",
        fit.estimates
    );
    assert!(
        (fit.estimates[1] - cfg.compressor_slope).abs() < 1e-8,
        "{:?}",
        fit.estimates
    );
    let fit = fit_parameters(&t, FitTarget::Membrane).unwrap();
    assert!((fit.estimates[0] - k_co).abs() < 1e-8, "{:?}", fit.estimates);
    assert!((fit.estimates[1] - k_h2).abs() < 1e-8, "{:?}", fit.estimates);
}

#[test]
fn noisy_fit_is_within_three_standard_errors() {
    // noise only on the fitted output, so the regressors are exact
    for (target, key, var) in [
        (FitTarget::Compressor, "recycle_noise_var", 0.1),
        (FitTarget::Membrane, "vent_noise_var", 0.002),
    ] {
        let cfg = with(&format!("{QUIET}\n{key} = {var}").replace(&format!("{key} = 0\n"), ""));
        for seed in 0..10 {
            let t = simulate(&cfg, 300, 50 + seed);
            let truth = match target {
                FitTarget::Compressor => [cfg.compressor_gain, cfg.compressor_slope],
                FitTarget::Membrane => [t.value(0, "k_co").unwrap(), t.value(0, "k_h2").unwrap()],
            };
            let fit = fit_parameters(&[t], target).unwrap();
            for (i, t) in truth.iter().enumerate() {
                let se = (var * fit.unscaled_cov[(i, i)]).sqrt();
                let err = (fit.estimates[i] - t).abs();
                assert!(
                    err <= 3.0 * se,
                    "{target:?} seed {seed} param {i}: error {err} > 3·{se}"
                );
            }
        }
    }
}

#[test]
fn too_few_observations_is_rank_error() {
    let t = simulate(&PlantConfig::default(), 1, 0);
    assert!(matches!(
        fit_parameters(&[t], FitTarget::Membrane),
        Err(Error::RankDeficient { rank: 1, params: 2 })
    ));
}

#[test]
fn misconfigured_level_variance_is_available() {
    let cfg = with("level_meter.noise_var = 0.01");
    assert_eq!(
        cfg.sensor_noise.get("level_meter"),
        dbnfilter::plant::LEVEL_VAR_MISCONFIGURED
    );
    assert_eq!(
        PlantConfig::default().sensor_noise.get("level_meter"),
        dbnfilter::plant::LEVEL_VAR
    );
}
