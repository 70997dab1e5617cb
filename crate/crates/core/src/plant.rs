//! Synthetic gas-loop plant.
//!
//! A recycle loop carries H2, CO2 and CO through a reactor (CO2 + H2 → CO +
//! H2O) and a membrane that vents mostly CO. Makeup feed replaces consumed gas
//! in stoichiometric proportion, so nothing but the stabilizing term restores
//! the H2/CO2 balance. Loop pressure, recycle, vent and feed flows and the
//! membrane pressure differential are quasi-steady: they come from a
//! fixed-point solve every step. Two pressure gauges read the same loop
//! pressure with independent biases; the flow meters respond to gas
//! composition. Water collects in a tank that is dumped on a schedule, which
//! also knocks the loop pressure down.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::gaussian::Gaussian;
use crate::model::{
    curr, local, prev, Cpd, FixedPointCpd, LinearCpd, LinearParams, Modes, NodeFn, Stage, Switched, Tbn, TbnBuilder,
    Trajectory, UpdateFn, DEFAULT_GAMMA, FIXED_POINT_MAX_ITER, FIXED_POINT_TOL,
};

pub const COMPRESSOR: &str = "compressor";
pub const DUMP: &str = "dump";

/// Outputs of the quasi-steady solve, in order.
pub const Z: [&str; 5] = ["pressure", "recycle", "vent", "feed", "dp"];
pub const COMPOSITIONS: [&str; 3] = ["c_h2", "c_co2", "c_co"];
pub const BIASES: [&str; 4] = ["bias_p3", "bias_p4", "bias_recycle", "bias_vent"];
pub const SENSORS: [&str; 9] = [
    "p3",
    "p4",
    "supply_meter",
    "dp_meter",
    "temp_meter",
    "feed_meter",
    "recycle_meter",
    "vent_meter",
    "level_meter",
];

#[derive(Clone, Debug, PartialEq)]
pub struct BiasConfig {
    pub gamma: f64,
    pub drift_var: f64,
    pub initial_mean: f64,
    pub initial_var: f64,
}

impl BiasConfig {
    fn new(drift_var: f64) -> Self {
        let gamma = DEFAULT_GAMMA;
        Self {
            gamma,
            drift_var,
            initial_mean: 0.0,
            initial_var: drift_var / (1.0 - gamma * gamma),
        }
    }
}

/// Measurement noise variance per sensor, in [`SENSORS`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorNoise(pub [f64; 9]);

impl SensorNoise {
    pub fn get(&self, sensor: &str) -> f64 {
        self.0[SENSORS.iter().position(|s| *s == sensor).expect("plant sensor")]
    }

    pub fn set(&mut self, sensor: &str, var: f64) {
        self.0[SENSORS.iter().position(|s| *s == sensor).expect("plant sensor")] = var;
    }
}

/// Default liquid-level variance, and the misconfigured alternative.
pub const LEVEL_VAR: f64 = 4.0;
pub const LEVEL_VAR_MISCONFIGURED: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct PlantConfig {
    /// Gain `s` of `−s·(c_h2 − c_h2*)` on the H2/CO2 balance.
    pub stabilization: f64,
    pub h2_target: f64,
    pub co_nominal: f64,
    /// `κ` in the CO production rate `κ·conversion·c_h2·c_co2`.
    pub reaction_rate: f64,
    /// `η` in the CO removal rate `η·vent·c_co`.
    pub vent_removal: f64,
    pub composition_noise_var: f64,

    pub compressor_gain: f64,
    pub compressor_low_gain: f64,
    pub compressor_slope: f64,
    pub vent_pressure: f64,
    pub k_co: f64,
    pub k_h2: f64,
    pub membrane_reversion: f64,
    pub membrane_drift_var: f64,
    /// Feed needed per unit recycle flow (water carried out of the loop).
    pub recycle_makeup: f64,
    pub pressure_relaxation: f64,
    pub loop_capacity: f64,
    /// Additive noise variances on the quasi-steady outputs, in [`Z`] order.
    pub z_noise_var: [f64; 5],
    pub fixed_point_tolerance: f64,
    pub fixed_point_max_iter: usize,

    pub supply_nominal: f64,
    pub supply_reversion: f64,
    pub supply_noise_var: f64,
    pub temperature_nominal: f64,
    pub temperature_reversion: f64,
    pub temperature_noise_var: f64,
    pub conversion_max: f64,
    pub conversion_midpoint: f64,
    pub conversion_width: f64,
    pub conversion_noise_var: f64,
    pub water_yield: f64,
    pub water_noise_var: f64,
    pub level_noise_var: f64,

    /// In [`BIASES`] order.
    pub biases: [BiasConfig; 4],
    pub sensor_noise: SensorNoise,
    /// Composition-dependent flow-meter response per unit flow of each gas.
    pub recycle_response: (f64, f64),
    pub vent_response: (f64, f64),

    /// Steps between tank dumps (0 disables them).
    pub dump_period: usize,
    pub dump_pressure: f64,
    pub dump_level: f64,
    /// Every `compressor_period` steps the compressor runs at low speed for
    /// `compressor_low_steps` steps (period 0 disables it).
    pub compressor_period: usize,
    pub compressor_low_steps: usize,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            stabilization: 0.02,
            h2_target: 0.45,
            co_nominal: 0.15,
            reaction_rate: 0.104,
            vent_removal: 0.0234,
            composition_noise_var: 1e-6,

            compressor_gain: 60.0,
            compressor_low_gain: 50.0,
            compressor_slope: 1.5,
            vent_pressure: 15.0,
            k_co: 0.5,
            k_h2: 0.15,
            membrane_reversion: 0.01,
            membrane_drift_var: 1e-7,
            recycle_makeup: 0.02,
            pressure_relaxation: 0.3,
            loop_capacity: 0.29,
            z_noise_var: [0.02, 0.1, 0.002, 0.005, 0.02],
            fixed_point_tolerance: FIXED_POINT_TOL,
            fixed_point_max_iter: FIXED_POINT_MAX_ITER,

            supply_nominal: 40.0,
            supply_reversion: 0.1,
            supply_noise_var: 0.05,
            temperature_nominal: 300.0,
            temperature_reversion: 0.05,
            temperature_noise_var: 1.0,
            conversion_max: 0.8,
            conversion_midpoint: 300.0,
            conversion_width: 20.0,
            conversion_noise_var: 1e-4,
            water_yield: 0.2,
            water_noise_var: 1e-3,
            level_noise_var: 0.05,

            biases: [
                BiasConfig::new(1e-3),
                BiasConfig::new(1e-3),
                BiasConfig::new(1e-2),
                BiasConfig::new(1e-4),
            ],
            sensor_noise: SensorNoise([1e-3, 1e-3, 3e-3, 1e-3, 0.05, 1e-3, 5e-3, 1e-4, LEVEL_VAR]),
            recycle_response: (1.4, 0.8),
            vent_response: (1.1, 1.4),

            dump_period: 100,
            dump_pressure: 3.0,
            dump_level: 50.0,
            compressor_period: 150,
            compressor_low_steps: 30,
        }
    }
}

impl PlantConfig {
    /// Applies (and consumes) plant keys from `cfg`.
    pub fn apply(&mut self, cfg: &mut Config) -> Result<()> {
        macro_rules! keys {
            ($($key:literal => $field:expr),* $(,)?) => {
                $(cfg.take_into($key, &mut $field)?;)*
            };
        }
        keys! {
            "stabilization" => self.stabilization,
            "h2_target" => self.h2_target,
            "co_nominal" => self.co_nominal,
            "reaction_rate" => self.reaction_rate,
            "vent_removal" => self.vent_removal,
            "composition_noise_var" => self.composition_noise_var,
            "compressor_gain" => self.compressor_gain,
            "compressor_low_gain" => self.compressor_low_gain,
            "compressor_slope" => self.compressor_slope,
            "vent_pressure" => self.vent_pressure,
            "k_co" => self.k_co,
            "k_h2" => self.k_h2,
            "membrane_reversion" => self.membrane_reversion,
            "membrane_drift_var" => self.membrane_drift_var,
            "recycle_makeup" => self.recycle_makeup,
            "pressure_relaxation" => self.pressure_relaxation,
            "loop_capacity" => self.loop_capacity,
            "fixed_point_tolerance" => self.fixed_point_tolerance,
            "fixed_point_max_iter" => self.fixed_point_max_iter,
            "supply_nominal" => self.supply_nominal,
            "supply_reversion" => self.supply_reversion,
            "supply_noise_var" => self.supply_noise_var,
            "temperature_nominal" => self.temperature_nominal,
            "temperature_reversion" => self.temperature_reversion,
            "temperature_noise_var" => self.temperature_noise_var,
            "conversion_max" => self.conversion_max,
            "conversion_midpoint" => self.conversion_midpoint,
            "conversion_width" => self.conversion_width,
            "conversion_noise_var" => self.conversion_noise_var,
            "water_yield" => self.water_yield,
            "water_noise_var" => self.water_noise_var,
            "level_noise_var" => self.level_noise_var,
            "recycle_response_h2" => self.recycle_response.0,
            "recycle_response_co2" => self.recycle_response.1,
            "vent_response_co" => self.vent_response.0,
            "vent_response_h2" => self.vent_response.1,
            "dump_period" => self.dump_period,
            "dump_pressure" => self.dump_pressure,
            "dump_level" => self.dump_level,
            "compressor_period" => self.compressor_period,
            "compressor_low_steps" => self.compressor_low_steps,
        }
        if let Some(g) = cfg.take::<f64>("gamma")? {
            self.biases.iter_mut().for_each(|b| b.gamma = g);
        }
        for (i, z) in Z.iter().enumerate() {
            cfg.take_into(&format!("{z}_noise_var"), &mut self.z_noise_var[i])?;
        }
        for (i, b) in BIASES.iter().enumerate() {
            let bc = &mut self.biases[i];
            cfg.take_into(&format!("{b}.gamma"), &mut bc.gamma)?;
            cfg.take_into(&format!("{b}.drift_var"), &mut bc.drift_var)?;
            cfg.take_into(&format!("{b}.initial_mean"), &mut bc.initial_mean)?;
            cfg.take_into(&format!("{b}.initial_var"), &mut bc.initial_var)?;
        }
        for (i, s) in SENSORS.iter().enumerate() {
            cfg.take_into(&format!("{s}.noise_var"), &mut self.sensor_noise.0[i])?;
        }
        self.check()
    }

    pub fn check(&self) -> Result<()> {
        let mut problems = Vec::new();
        let variances = [
            ("composition_noise_var", self.composition_noise_var),
            ("membrane_drift_var", self.membrane_drift_var),
            ("supply_noise_var", self.supply_noise_var),
            ("temperature_noise_var", self.temperature_noise_var),
            ("conversion_noise_var", self.conversion_noise_var),
            ("water_noise_var", self.water_noise_var),
            ("level_noise_var", self.level_noise_var),
        ];
        for (k, v) in variances {
            if !(v >= 0.0) {
                problems.push(format!("{k} must be >= 0"));
            }
        }
        for (z, v) in Z.iter().zip(self.z_noise_var) {
            if !(v >= 0.0) {
                problems.push(format!("{z}_noise_var must be >= 0"));
            }
        }
        for (s, v) in SENSORS.iter().zip(self.sensor_noise.0) {
            if !(v >= 0.0) {
                problems.push(format!("{s}.noise_var must be >= 0"));
            }
        }
        for (b, c) in BIASES.iter().zip(&self.biases) {
            if !(c.gamma > 0.0 && c.gamma <= 1.0) {
                problems.push(format!("{b}.gamma must lie in (0, 1]"));
            }
            if !(c.drift_var >= 0.0 && c.initial_var >= 0.0) {
                problems.push(format!("{b} variances must be >= 0"));
            }
        }
        if !(self.k_co > 0.0 && self.k_h2 > 0.0) {
            problems.push("membrane permeabilities must be > 0".into());
        }
        let co2 = 1.0 - self.h2_target - self.co_nominal;
        if !(self.h2_target > 0.0 && self.co_nominal > 0.0 && co2 > 0.0) {
            problems.push("h2_target and co_nominal must leave a positive CO2 fraction".into());
        }
        if !(self.pressure_relaxation > 0.0 && self.pressure_relaxation <= 1.0) {
            problems.push("pressure_relaxation must lie in (0, 1]".into());
        }
        if !(self.loop_capacity > 0.0) {
            problems.push("loop_capacity must be > 0".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn co2_nominal(&self) -> f64 {
        1.0 - self.h2_target - self.co_nominal
    }

    pub fn conversion(&self, temperature: f64) -> f64 {
        self.conversion_max / (1.0 + (-(temperature - self.conversion_midpoint) / self.conversion_width).exp())
    }

    /// Quasi-steady loop state at nominal inputs.
    pub fn nominal_z(&self) -> Result<[f64; 5]> {
        let law = LoopLaw::from(self);
        let inputs = [
            self.h2_target,
            self.co2_nominal(),
            self.co_nominal,
            self.supply_nominal,
            self.k_co,
            self.k_h2,
            0.0,
        ];
        // iterate the pressure recursion to its own steady state
        let mut z = [self.supply_nominal - 10.0, 0.0, 0.0, 0.0, 0.0];
        for _ in 0..10_000 {
            let mut args = inputs;
            args[6] = z[0];
            let mut next = [0.0; 5];
            law.solve(&z, &args, 0, false, &mut next)?;
            let done = (next[0] - z[0]).abs() < 1e-12;
            z = next;
            if done {
                break;
            }
        }
        Ok(z)
    }
}

/// Loop equations, Gauss–Seidel ordered so one sweep is a contraction in the
/// loop pressure alone.
#[derive(Clone, Copy, Debug)]
struct LoopLaw {
    gain: f64,
    low_gain: f64,
    slope: f64,
    vent_pressure: f64,
    makeup: f64,
    relaxation: f64,
    capacity: f64,
    dump: f64,
    tolerance: f64,
    max_iter: usize,
}

impl From<&PlantConfig> for LoopLaw {
    fn from(c: &PlantConfig) -> Self {
        Self {
            gain: c.compressor_gain,
            low_gain: c.compressor_low_gain,
            slope: c.compressor_slope,
            vent_pressure: c.vent_pressure,
            makeup: c.recycle_makeup,
            relaxation: c.pressure_relaxation,
            capacity: c.loop_capacity,
            dump: c.dump_pressure,
            tolerance: c.fixed_point_tolerance,
            max_iter: c.fixed_point_max_iter,
        }
    }
}

impl LoopLaw {
    /// One sweep. `x = (c_h2, c_co2, c_co, supply, k_co, k_h2, pressure_prev)`.
    fn sweep(&self, z: &[f64], x: &[f64], compressor: i64, dump: bool, out: &mut [f64]) {
        let (c_h2, c_co, supply, k_co, k_h2, p_prev) = (x[0], x[2], x[3], x[4], x[5], x[6]);
        let a = if compressor == 1 { self.low_gain } else { self.gain };
        let dp = z[0] - self.vent_pressure;
        let recycle = a - self.slope * dp;
        let vent = dp * (k_co * c_co + k_h2 * c_h2);
        let feed = vent + self.makeup * recycle;
        let forcing = if dump { self.dump } else { 0.0 };
        let pressure = (1.0 - self.relaxation) * p_prev + self.relaxation * (supply - feed / self.capacity) - forcing;
        out.copy_from_slice(&[pressure, recycle, vent, feed, dp]);
    }

    /// Plain iteration from `z0`; `out` receives the fixed point.
    fn solve(&self, z0: &[f64], x: &[f64], compressor: i64, dump: bool, out: &mut [f64]) -> Result<usize> {
        let mut z = [0.0; 5];
        z.copy_from_slice(z0);
        let mut next = [0.0; 5];
        let mut residual = f64::INFINITY;
        for it in 1..=self.max_iter {
            self.sweep(&z, x, compressor, dump, &mut next);
            residual = z.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            z = next;
            if residual < self.tolerance {
                out.copy_from_slice(&z);
                return Ok(it);
            }
        }
        Err(Error::FixedPointDiverged {
            iterations: self.max_iter,
            residual,
        })
    }
}

fn scalar(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> NodeFn {
    Arc::new(move |x: &[f64], _: &Modes, out: &mut [f64]| out[0] = f(x))
}

/// Builds the validated plant 2TBN.
pub fn build_plant_model(cfg: &PlantConfig) -> Result<Tbn> {
    cfg.check()?;
    let mut b = TbnBuilder::new()
        .state("c_h2", "mol frac")
        .state("c_co2", "mol frac")
        .state("c_co", "mol frac")
        .state("pressure", "psi")
        .state("recycle", "slpm")
        .state("vent", "slpm")
        .state("feed", "slpm")
        .state("dp", "psi")
        .state("supply", "psi")
        .state("temperature", "degC")
        .state("k_co", "slpm/psi")
        .state("k_h2", "slpm/psi")
        .state("level", "mm")
        .state("water_rate", "mm/step");
    for bias in BIASES {
        b = b.bias_var(bias, "");
    }
    b = b.transient("conversion", "");
    for (s, units) in SENSORS
        .iter()
        .zip(["psi", "psi", "psi", "psi", "degC", "slpm", "slpm", "slpm", "mm"])
    {
        b = b.sensor(s, units);
    }
    b = b
        .encapsulated("recycle_h2", "slpm")
        .encapsulated("recycle_co2", "slpm")
        .encapsulated("vent_co", "slpm")
        .encapsulated("vent_h2", "slpm")
        .mode_signal(COMPRESSOR)
        .mode_signal(DUMP);

    // exogenous slow variables
    let rev =
        |name: &str, rate: f64, nominal: f64, var: f64| Cpd::linear(&[(prev(name), 1.0 - rate)], rate * nominal, var);
    b = b
        .cpd(
            &["supply"],
            rev("supply", cfg.supply_reversion, cfg.supply_nominal, cfg.supply_noise_var),
        )
        .cpd(
            &["temperature"],
            rev(
                "temperature",
                cfg.temperature_reversion,
                cfg.temperature_nominal,
                cfg.temperature_noise_var,
            ),
        )
        .cpd(
            &["k_co"],
            rev("k_co", cfg.membrane_reversion, cfg.k_co, cfg.membrane_drift_var),
        )
        .cpd(
            &["k_h2"],
            rev(
                "k_h2",
                cfg.membrane_reversion,
                cfg.k_h2,
                cfg.membrane_drift_var * (cfg.k_h2 / cfg.k_co).powi(2),
            ),
        );

    let (cmax, mid, width) = (cfg.conversion_max, cfg.conversion_midpoint, cfg.conversion_width);
    b = b.cpd(
        &["conversion"],
        Cpd::nonlinear(
            vec![curr("temperature")],
            scalar(move |x| cmax / (1.0 + (-(x[0] - mid) / width).exp())),
            DMatrix::from_element(1, 1, cfg.conversion_noise_var),
        ),
    );

    // compositions: inputs (conversion', c_h2, c_co2, c_co, vent)
    let comp_inputs = vec![
        curr("conversion"),
        prev("c_h2"),
        prev("c_co2"),
        prev("c_co"),
        prev("vent"),
    ];
    let (kappa, eta, s, target) = (cfg.reaction_rate, cfg.vent_removal, cfg.stabilization, cfg.h2_target);
    let net_co = move |x: &[f64]| kappa * x[0] * x[1] * x[2] - eta * x[4] * x[3];
    let cn = DMatrix::from_element(1, 1, cfg.composition_noise_var);
    b = b
        .cpd(
            &["c_h2"],
            Cpd::nonlinear(
                comp_inputs.clone(),
                scalar(move |x| x[1] - 0.5 * net_co(x) - s * (x[1] - target)),
                cn.clone(),
            ),
        )
        .cpd(
            &["c_co"],
            Cpd::nonlinear(comp_inputs, scalar(move |x| x[3] + net_co(x)), cn),
        )
        .cpd(
            &["c_co2"],
            Cpd::linear(&[(curr("c_h2"), -1.0), (curr("c_co"), -1.0)], 1.0, 0.0),
        );

    // quasi-steady loop
    let law = LoopLaw::from(cfg);
    let update: UpdateFn = Arc::new(move |z: &[f64], x: &[f64], modes: &Modes, out: &mut [f64]| {
        law.sweep(z, x, modes.get(COMPRESSOR), modes.get(DUMP) == 1, out)
    });
    b = b.cpd(
        &Z,
        Cpd::FixedPoint(FixedPointCpd {
            inputs: vec![
                curr("c_h2"),
                curr("c_co2"),
                curr("c_co"),
                curr("supply"),
                curr("k_co"),
                curr("k_h2"),
                prev("pressure"),
            ],
            update,
            nominal: cfg.nominal_z()?.to_vec(),
            warm_start: true,
            tolerance: cfg.fixed_point_tolerance,
            max_iter: cfg.fixed_point_max_iter,
            noise_cov: DMatrix::from_diagonal(&DVector::from_column_slice(&cfg.z_noise_var)),
            precision: None,
        }),
    );

    // water
    let y = cfg.water_yield;
    b = b
        .cpd(
            &["water_rate"],
            Cpd::nonlinear(
                vec![curr("conversion"), curr("c_h2"), curr("c_co2"), curr("recycle")],
                scalar(move |x| y * x[0] * x[1] * x[2] * x[3]),
                DMatrix::from_element(1, 1, cfg.water_noise_var),
            ),
        )
        .cpd(
            &["level"],
            Cpd::Linear(LinearCpd {
                inputs: vec![prev("level"), curr("water_rate")],
                params: Switched::by_mode(
                    DUMP,
                    LinearParams {
                        weights: vec![1.0, 1.0],
                        intercept: 0.0,
                        noise_var: cfg.level_noise_var,
                    },
                    vec![(
                        1,
                        LinearParams {
                            weights: vec![1.0, 1.0],
                            intercept: -cfg.dump_level,
                            noise_var: cfg.level_noise_var,
                        },
                    )],
                ),
            }),
        );

    for (name, bc) in BIASES.iter().zip(&cfg.biases) {
        b = b.cpd(&[name], Cpd::bias(bc.gamma, bc.drift_var));
    }

    let noise = |s: &str| cfg.sensor_noise.get(s);
    b = b
        .cpd(
            &["p3"],
            Cpd::linear(&[(curr("pressure"), 1.0), (curr("bias_p3"), 1.0)], 0.0, noise("p3")),
        )
        .cpd(
            &["p4"],
            Cpd::linear(&[(curr("pressure"), 1.0), (curr("bias_p4"), 1.0)], 0.0, noise("p4")),
        )
        .cpd(
            &["supply_meter"],
            Cpd::linear(&[(curr("supply"), 1.0)], 0.0, noise("supply_meter")),
        )
        .cpd(&["dp_meter"], Cpd::linear(&[(curr("dp"), 1.0)], 0.0, noise("dp_meter")))
        .cpd(
            &["temp_meter"],
            Cpd::linear(&[(curr("temperature"), 1.0)], 0.0, noise("temp_meter")),
        )
        .cpd(
            &["feed_meter"],
            Cpd::linear(&[(curr("feed"), 1.0)], 0.0, noise("feed_meter")),
        )
        .cpd(
            &["recycle_meter"],
            flow_meter(
                "recycle_meter",
                ("recycle_h2", "c_h2"),
                ("recycle_co2", "c_co2"),
                "recycle",
                "bias_recycle",
                cfg.recycle_response,
                noise("recycle_meter"),
            ),
        )
        .cpd(
            &["vent_meter"],
            flow_meter(
                "vent_meter",
                ("vent_co", "c_co"),
                ("vent_h2", "c_h2"),
                "vent",
                "bias_vent",
                cfg.vent_response,
                noise("vent_meter"),
            ),
        )
        .cpd(
            &["level_meter"],
            Cpd::linear(&[(curr("level"), 1.0)], 0.0, noise("level_meter")),
        );
    b.build()
}

/// Thermal flow meter: reading = r₁·(c₁·flow) + r₂·(c₂·flow) + bias, with the
/// two partial flows as encapsulated stages.
fn flow_meter(
    sensor: &str,
    first: (&str, &str),
    second: (&str, &str),
    flow: &str,
    bias: &str,
    response: (f64, f64),
    noise_var: f64,
) -> Cpd {
    let product = scalar(|x| x[0] * x[1]);
    let (r1, r2) = response;
    Cpd::staged(
        vec![
            Stage {
                output: first.0.into(),
                inputs: vec![curr(first.1), curr(flow)],
                func: product.clone(),
            },
            Stage {
                output: second.0.into(),
                inputs: vec![curr(second.1), curr(flow)],
                func: product,
            },
            Stage {
                output: sensor.into(),
                inputs: vec![local(first.0), local(second.0), curr(bias)],
                func: scalar(move |x| r1 * x[0] + r2 * x[1] + x[2]),
            },
        ],
        noise_var,
    )
}

/// Prior over the persistent variables: nominal operating point, compositions
/// on the simplex.
pub fn initial_belief(cfg: &PlantConfig) -> Result<Gaussian> {
    let z = cfg.nominal_z()?;
    let mut names: Vec<&str> = vec!["c_h2", "c_co"];
    let mut mean = vec![cfg.h2_target, cfg.co_nominal];
    let mut var = vec![1e-4, 1e-4];
    let zvar = [0.1, 0.5, 0.01, 0.01, 0.1];
    for (i, n) in Z.iter().enumerate() {
        names.push(n);
        mean.push(z[i]);
        var.push(zvar[i]);
    }
    let x = cfg.conversion(cfg.temperature_nominal);
    let water = cfg.water_yield * x * cfg.h2_target * cfg.co2_nominal() * z[1];
    let rest: [(&str, f64, f64); 6] = [
        ("supply", cfg.supply_nominal, 0.1),
        ("temperature", cfg.temperature_nominal, 4.0),
        ("k_co", cfg.k_co, (0.02 * cfg.k_co).powi(2)),
        ("k_h2", cfg.k_h2, (0.02 * cfg.k_h2).powi(2)),
        ("level", 0.5 * cfg.dump_level, 4.0),
        ("water_rate", water, 0.01),
    ];
    for (n, m, v) in rest {
        names.push(n);
        mean.push(m);
        var.push(v);
    }
    for (n, bc) in BIASES.iter().zip(&cfg.biases) {
        names.push(n);
        mean.push(bc.initial_mean);
        var.push(bc.initial_var);
    }
    let g = Gaussian::from_diagonal(&names, &mean, &var)?.extend_linear(
        "c_co2",
        &[("c_h2", -1.0), ("c_co", -1.0)],
        1.0,
        0.0,
    )?;
    let model_order: Vec<&str> = ["c_h2", "c_co2", "c_co"]
        .into_iter()
        .chain(Z)
        .chain(["supply", "temperature", "k_co", "k_h2", "level", "water_rate"])
        .chain(BIASES)
        .collect();
    g.select(&model_order)
}

/// Mode schedule: `modes[k]` drives the transition into step `k + 1`.
pub fn schedule(cfg: &PlantConfig, steps: usize) -> Vec<Modes> {
    (1..=steps)
        .map(|step| {
            let mut m = Modes::new();
            if cfg.dump_period > 0 && step % cfg.dump_period == 0 {
                m.set(DUMP, 1);
            }
            if cfg.compressor_period > 0
                && step % cfg.compressor_period
                    >= cfg.compressor_period - cfg.compressor_low_steps.min(cfg.compressor_period)
            {
                m.set(COMPRESSOR, 1);
            }
            m
        })
        .collect()
}

/// Parameter groups that enter their law linearly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FitTarget {
    /// `recycle = a − b·dp` over steps with the compressor at normal speed.
    Compressor,
    /// `vent = dp·(k_co·c_co + k_h2·c_h2)`.
    Membrane,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fit {
    pub names: Vec<String>,
    pub estimates: Vec<f64>,
    pub residual_norm: f64,
    pub observations: usize,
    /// `(XᵀX)⁻¹` of the design, for standard errors given a noise variance.
    pub unscaled_cov: DMatrix<f64>,
}

/// Ordinary least squares over the true trajectory values.
pub fn fit_parameters(trajectories: &[Trajectory], target: FitTarget) -> Result<Fit> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut ys = Vec::new();
    for t in trajectories {
        for step in 1..=t.len() {
            let v = |n: &str| t.value(step, n).ok_or_else(|| Error::UnknownLabel(n.into()));
            match target {
                FitTarget::Compressor => {
                    if t.modes.get(step - 1).map(|m| m.get(COMPRESSOR)).unwrap_or(0) != 0 {
                        continue;
                    }
                    rows.push(vec![1.0, -v("dp")?]);
                    ys.push(v("recycle")?);
                }
                FitTarget::Membrane => {
                    let dp = v("dp")?;
                    rows.push(vec![dp * v("c_co")?, dp * v("c_h2")?]);
                    ys.push(v("vent")?);
                }
            }
        }
    }
    let names: Vec<String> = match target {
        FitTarget::Compressor => vec!["compressor_gain".into(), "compressor_slope".into()],
        FitTarget::Membrane => vec!["k_co".into(), "k_h2".into()],
    };
    let x = DMatrix::from_fn(rows.len(), names.len(), |i, j| rows[i][j]);
    let y = DVector::from_vec(ys);
    let (beta, residual_norm, unscaled_cov) = ols(&x, &y)?;
    Ok(Fit {
        names,
        estimates: beta.iter().copied().collect(),
        residual_norm,
        observations: y.len(),
        unscaled_cov,
    })
}

/// Least squares via SVD; errors when the design has rank below its column count.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<(DVector<f64>, f64, DMatrix<f64>)> {
    let p = x.ncols();
    if x.nrows() < p {
        return Err(Error::RankDeficient {
            rank: x.nrows(),
            params: p,
        });
    }
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-12 * x.nrows().max(p) as f64;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < p {
        return Err(Error::RankDeficient { rank, params: p });
    }
    let beta = svd.solve(y, tol).map_err(|e| Error::Singular(e.to_string()))?;
    let residual = (y - x * &beta).norm();
    let xtx = x.transpose() * x;
    let unscaled = xtx.try_inverse().ok_or(Error::RankDeficient { rank, params: p })?;
    Ok((beta, residual, unscaled))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_model_validates() {
        let m = build_plant_model(&PlantConfig::default()).unwrap();
        assert!(m.validate().is_empty());
        assert_eq!(m.persistent().len(), 18);
    }

    #[test]
    fn nominal_point_is_a_fixed_point() {
        let cfg = PlantConfig::default();
        let z = cfg.nominal_z().unwrap();
        assert!((z[4] - (z[0] - cfg.vent_pressure)).abs() < 1e-12);
        assert!(z.iter().all(|v| v.is_finite() && *v > 0.0));
    }

    #[test]
    fn config_keys_apply_and_unknown_keys_fail() {
        let mut cfg = PlantConfig::default();
        let mut c = Config::parse("stabilization = 0\nlevel_meter.noise_var = 0.01\nbias_p3.gamma = 1").unwrap();
        cfg.apply(&mut c).unwrap();
        c.finish().unwrap();
        assert_eq!(cfg.stabilization, 0.0);
        assert_eq!(cfg.sensor_noise.get("level_meter"), 0.01);
        assert_eq!(cfg.biases[0].gamma, 1.0);

        let mut c = Config::parse("bias_p3.gamma = 1.5").unwrap();
        assert!(PlantConfig::default().apply(&mut c).is_err());
    }

    #[test]
    fn schedule_marks_dumps_and_low_speed() {
        let cfg = PlantConfig::default();
        let m = schedule(&cfg, 300);
        assert_eq!(m[99].get(DUMP), 1);
        assert_eq!(m[98].get(DUMP), 0);
        assert_eq!(m[119].get(COMPRESSOR), 1);
        assert_eq!(m[118].get(COMPRESSOR), 0);
        assert_eq!(m[149].get(COMPRESSOR), 0);
    }

    #[test]
    fn single_observation_is_rank_deficient() {
        let x = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let y = DVector::from_element(1, 3.0);
        assert!(matches!(ols(&x, &y), Err(Error::RankDeficient { .. })));
    }
}
