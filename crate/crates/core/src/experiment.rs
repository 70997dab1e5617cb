//! Simulation-and-tracking experiments behind the command-line tool.
//!
//! A [`Scenario`] pairs the model used by the filters with the model that
//! generates ground truth (they differ only when `truth.`-prefixed config keys
//! are given, e.g. to inject a constant sensor bias). Reports are plain data
//! with deterministic serialization; wall-clock timings are kept apart so that
//! repeated runs produce identical reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use crate::baselines::{run_particle_filter, Ekf, MonolithicUf};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::gaussian::Gaussian;
use crate::model::{curr, forward_sample, prev, Cpd, Modes, Tbn, TbnBuilder, Trajectory};
use crate::plant::{build_plant_model, initial_belief, schedule, PlantConfig, COMPOSITIONS};
use crate::quadrature::{exactness_table, ExactnessRow, Precision, EXACTNESS_TOL};
use crate::tracker::{track_sequence, GaussianFilter, StructuredFilter};

/// Variance floor for the truth log-likelihood metric.
pub const LOG_LIKELIHOOD_VAR_FLOOR: f64 = 1e-24;
/// Offset between the trajectory seed and the particle filter's seed.
pub const PF_SEED_OFFSET: u64 = 0x9e37_79b9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FilterKind {
    /// Uses the run's configured precision.
    Structured,
    StructuredP(Precision),
    Ekf,
    Uf,
    Pf,
}

impl FilterKind {
    pub fn label(self, settings: &Settings) -> String {
        match self {
            FilterKind::Structured => format!("structured-p{}", settings.precision),
            FilterKind::StructuredP(p) => format!("structured-p{p}"),
            FilterKind::Ekf => "ekf".into(),
            FilterKind::Uf => "uf".into(),
            FilterKind::Pf => "pf".into(),
        }
    }
}

impl FromStr for FilterKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "structured" => FilterKind::Structured,
            "structured-p3" => FilterKind::StructuredP(Precision::Three),
            "structured-p5" => FilterKind::StructuredP(Precision::Five),
            "structured-p7" => FilterKind::StructuredP(Precision::Seven),
            "ekf" => FilterKind::Ekf,
            "uf" => FilterKind::Uf,
            "pf" => FilterKind::Pf,
            other => {
                return Err(format!(
                    "unknown filter '{other}' (expected structured, structured-p3, structured-p5, structured-p7, ekf, uf or pf)"
                ))
            }
        })
    }
}

/// Parses a comma-separated filter list.
pub fn parse_filters(list: &str) -> std::result::Result<Vec<FilterKind>, String> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(FilterKind::from_str)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub steps: usize,
    pub particles: usize,
    pub precision: Precision,
    pub kappa: Option<f64>,
    /// Sensors whose readings are withheld from every filter.
    pub drop_sensors: Vec<String>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 500,
            particles: 10_000,
            precision: Precision::Three,
            kappa: None,
            drop_sensors: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
enum Schedule {
    Constant,
    Plant(Box<PlantConfig>),
}

/// A registered model with its truth generator.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub model: Tbn,
    pub initial: Gaussian,
    pub truth_model: Tbn,
    pub truth_initial: Gaussian,
    /// Hidden variables summarized in the headline metrics.
    pub focus: Vec<String>,
    schedule: Schedule,
}

/// Registered model names.
pub const MODELS: [&str; 2] = ["plant", "linear"];

impl Scenario {
    /// Builds the scenario named by the `model` key (default `plant`) and the
    /// run settings given in the config. Unknown keys are errors.
    pub fn from_config(mut cfg: Config) -> Result<(Self, Settings)> {
        let name: String = cfg.take("model")?.unwrap_or_else(|| "plant".into());
        let mut settings = Settings::default();
        cfg.take_into("seed", &mut settings.seed)?;
        cfg.take_into("steps", &mut settings.steps)?;
        cfg.take_into("particles", &mut settings.particles)?;
        if let Some(p) = cfg.take::<u32>("precision")? {
            settings.precision = Precision::try_from(p)?;
        }
        settings.kappa = cfg.take("kappa")?;
        if let Some(list) = cfg.take::<String>("drop_sensors")? {
            settings.drop_sensors = list
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
        }

        let mut truth = cfg.split_prefix("truth.");
        let scenario = match name.as_str() {
            "plant" => {
                let mut pc = PlantConfig::default();
                pc.apply(&mut cfg)?;
                cfg.finish()?;
                let mut tc = pc.clone();
                tc.apply(&mut truth)?;
                truth.finish()?;
                Self::plant(&pc, &tc)?
            }
            "linear" => {
                let mut lc = LinearConfig::default();
                lc.apply(&mut cfg)?;
                cfg.finish()?;
                let mut tc = lc.clone();
                tc.apply(&mut truth)?;
                truth.finish()?;
                Self::linear(&lc, &tc)?
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown model '{other}' (expected one of: {})",
                    MODELS.join(", ")
                )))
            }
        };
        for s in &settings.drop_sensors {
            if !scenario.model.sensors().contains(s) {
                return Err(Error::Config(format!("drop_sensors: '{s}' is not a sensor")));
            }
        }
        Ok((scenario, settings))
    }

    pub fn plant(cfg: &PlantConfig, truth: &PlantConfig) -> Result<Self> {
        Ok(Self {
            name: "plant".into(),
            model: build_plant_model(cfg)?,
            initial: initial_belief(cfg)?,
            truth_model: build_plant_model(truth)?,
            truth_initial: initial_belief(truth)?,
            focus: COMPOSITIONS.iter().map(|s| s.to_string()).collect(),
            schedule: Schedule::Plant(Box::new(truth.clone())),
        })
    }

    pub fn linear(cfg: &LinearConfig, truth: &LinearConfig) -> Result<Self> {
        let model = build_linear_model(cfg)?;
        Ok(Self {
            name: "linear".into(),
            focus: model.persistent(),
            initial: linear_initial(cfg)?,
            truth_model: build_linear_model(truth)?,
            truth_initial: linear_initial(truth)?,
            model,
            schedule: Schedule::Constant,
        })
    }

    pub fn modes(&self, steps: usize) -> Vec<Modes> {
        match &self.schedule {
            Schedule::Constant => vec![Modes::new(); steps],
            Schedule::Plant(cfg) => schedule(cfg, steps),
        }
    }

    pub fn simulate(&self, seed: u64, steps: usize) -> Result<Trajectory> {
        forward_sample(&self.truth_model, &self.truth_initial, &self.modes(steps), steps, seed)
    }

    /// Per-step evidence from `traj`, without the dropped sensors.
    pub fn evidence(&self, traj: &Trajectory, drop: &[String]) -> Vec<Vec<(String, f64)>> {
        let sensors: Vec<String> = self.model.sensors().into_iter().filter(|s| !drop.contains(s)).collect();
        (1..=traj.len()).map(|k| traj.evidence(k, &sensors)).collect()
    }
}

/// Six-dimensional all-linear toy: three position/velocity pairs, positions
/// observed.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearConfig {
    pub dt: f64,
    pub damping: f64,
    pub process_noise_var: f64,
    pub sensor_noise_var: f64,
    pub coupling: f64,
}

impl Default for LinearConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            damping: 0.95,
            process_noise_var: 0.01,
            sensor_noise_var: 0.04,
            coupling: 0.05,
        }
    }
}

impl LinearConfig {
    pub fn apply(&mut self, cfg: &mut Config) -> Result<()> {
        cfg.take_into("dt", &mut self.dt)?;
        cfg.take_into("damping", &mut self.damping)?;
        cfg.take_into("process_noise_var", &mut self.process_noise_var)?;
        cfg.take_into("sensor_noise_var", &mut self.sensor_noise_var)?;
        cfg.take_into("coupling", &mut self.coupling)?;
        Ok(())
    }
}

pub fn build_linear_model(cfg: &LinearConfig) -> Result<Tbn> {
    let axes = ["x", "y", "z"];
    let mut b = TbnBuilder::new();
    for a in axes {
        b = b.state(&format!("p{a}"), "m").state(&format!("v{a}"), "m/s");
    }
    for a in axes {
        b = b.sensor(&format!("s{a}"), "m");
    }
    for (i, a) in axes.iter().enumerate() {
        let next = axes[(i + 1) % 3];
        b = b
            .cpd(
                &[&format!("p{a}")],
                Cpd::linear(
                    &[(prev(&format!("p{a}")), 1.0), (prev(&format!("v{a}")), cfg.dt)],
                    0.0,
                    0.1 * cfg.process_noise_var,
                ),
            )
            .cpd(
                &[&format!("v{a}")],
                Cpd::linear(
                    &[
                        (prev(&format!("v{a}")), cfg.damping),
                        (prev(&format!("p{next}")), -cfg.coupling),
                    ],
                    0.0,
                    cfg.process_noise_var,
                ),
            )
            .cpd(
                &[&format!("s{a}")],
                Cpd::linear(
                    &[(curr(&format!("p{a}")), 1.0), (curr(&format!("v{a}")), 0.2)],
                    0.1,
                    cfg.sensor_noise_var,
                ),
            );
    }
    b.build()
}

pub fn linear_initial(_cfg: &LinearConfig) -> Result<Gaussian> {
    let labels = ["px", "vx", "py", "vy", "pz", "vz"];
    Gaussian::from_diagonal(
        &labels,
        &[1.0, 0.0, -1.0, 0.5, 0.0, -0.5],
        &[1.0, 0.25, 1.0, 0.25, 1.0, 0.25],
    )
}

/// Degeneracy statistics of a particle filter run.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Degeneracy {
    pub above_0_5: f64,
    pub above_0_9: f64,
    pub above_0_99: f64,
    pub mean_ess: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FilterReport {
    pub name: String,
    pub status: String,
    pub failed_step: Option<usize>,
    pub error: Option<String>,
    pub steps: usize,
    pub rmse: BTreeMap<String, f64>,
    pub coverage: BTreeMap<String, f64>,
    /// Pooled over the scenario's focus variables.
    pub focus_rmse: f64,
    pub focus_coverage: f64,
    /// Mean per-step log-density of the true focus values under the filtered
    /// marginals.
    pub mean_log_likelihood: f64,
    /// Mean per-step log-likelihood of the evidence.
    pub mean_evidence_log_likelihood: f64,
    pub evaluations_per_step: f64,
    pub total_evaluations: usize,
    pub repairs: usize,
    pub clipped_steps: usize,
    pub degeneracy: Option<Degeneracy>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub model: String,
    pub seed: u64,
    pub steps: usize,
    pub particles: usize,
    pub dropped_sensors: Vec<String>,
    pub focus: Vec<String>,
    pub filters: Vec<FilterReport>,
}

/// One filter's output on one trajectory.
#[derive(Debug)]
pub struct FilterRun {
    pub report: FilterReport,
    /// `step,variable,truth,estimate,std` rows.
    pub csv: String,
    pub seconds_per_step: f64,
    pub error: Option<Error>,
}

/// Normalized per-step output shared by all filters.
struct StepView<'a> {
    belief: &'a Gaussian,
    evaluations: usize,
    repairs: usize,
    clipped: bool,
    evidence_ll: f64,
    max_weight: Option<f64>,
    ess: Option<f64>,
}

pub const CSV_HEADER: &str = "step,variable,truth,estimate,std\n";

fn summarize(
    name: String,
    scenario: &Scenario,
    traj: &Trajectory,
    views: &[StepView<'_>],
    error: Option<&Error>,
) -> (FilterReport, String) {
    let vars = scenario.model.persistent();
    let n = views.len();
    let mut csv = String::from(CSV_HEADER);
    let mut sq: BTreeMap<&str, f64> = BTreeMap::new();
    let mut hits: BTreeMap<&str, usize> = BTreeMap::new();
    let mut ll_total = 0.0;
    for (k, v) in views.iter().enumerate() {
        let step = k + 1;
        for var in &vars {
            let truth = traj.value(step, var).unwrap_or(f64::NAN);
            let mean = v.belief.mean_of(var).unwrap_or(f64::NAN);
            let var_ = v.belief.var_of(var).unwrap_or(f64::NAN);
            let sd = var_.max(0.0).sqrt();
            writeln!(csv, "{step},{var},{truth:.16e},{mean:.16e},{sd:.16e}").unwrap();
            *sq.entry(var).or_default() += (truth - mean).powi(2);
            *hits.entry(var).or_default() += usize::from((truth - mean).abs() <= 2.0 * sd);
            if scenario.focus.contains(var) {
                let s2 = var_.max(LOG_LIKELIHOOD_VAR_FLOOR);
                ll_total += -0.5 * ((truth - mean).powi(2) / s2 + (2.0 * std::f64::consts::PI * s2).ln());
            }
        }
    }
    let denom = n.max(1) as f64;
    let rmse: BTreeMap<String, f64> = sq.iter().map(|(k, v)| (k.to_string(), (v / denom).sqrt())).collect();
    let coverage: BTreeMap<String, f64> = hits.iter().map(|(k, v)| (k.to_string(), *v as f64 / denom)).collect();
    let nf = scenario.focus.len().max(1) as f64;
    let focus_rmse = (scenario
        .focus
        .iter()
        .map(|f| sq.get(f.as_str()).copied().unwrap_or(0.0))
        .sum::<f64>()
        / (denom * nf))
        .sqrt();
    let focus_coverage = scenario
        .focus
        .iter()
        .map(|f| hits.get(f.as_str()).copied().unwrap_or(0))
        .sum::<usize>() as f64
        / (denom * nf);
    let total_evaluations: usize = views.iter().map(|v| v.evaluations).sum();
    let degeneracy = views.first().and_then(|v| v.max_weight).map(|_| {
        let frac = |t: f64| views.iter().filter(|v| v.max_weight.unwrap_or(0.0) > t).count() as f64 / denom;
        Degeneracy {
            above_0_5: frac(0.5),
            above_0_9: frac(0.9),
            above_0_99: frac(0.99),
            mean_ess: views.iter().map(|v| v.ess.unwrap_or(0.0)).sum::<f64>() / denom,
        }
    });
    let report = FilterReport {
        name,
        status: if error.is_some() { "failed".into() } else { "ok".into() },
        failed_step: error.and_then(Error::step),
        error: error.map(|e| e.to_string()),
        steps: n,
        rmse,
        coverage,
        focus_rmse: if n == 0 { 0.0 } else { focus_rmse },
        focus_coverage: if n == 0 { 0.0 } else { focus_coverage },
        mean_log_likelihood: if n == 0 { 0.0 } else { ll_total / denom },
        mean_evidence_log_likelihood: if n == 0 {
            0.0
        } else {
            views.iter().map(|v| v.evidence_ll).sum::<f64>() / denom
        },
        evaluations_per_step: if n == 0 { 0.0 } else { total_evaluations as f64 / denom },
        total_evaluations,
        repairs: views.iter().map(|v| v.repairs).sum(),
        clipped_steps: views.iter().filter(|v| v.clipped).count(),
        degeneracy,
    };
    (report, csv)
}

/// Runs one filter over `traj`.
pub fn run_filter(scenario: &Scenario, settings: &Settings, kind: FilterKind, traj: &Trajectory) -> Result<FilterRun> {
    let modes = scenario.modes(traj.len());
    let evidence = scenario.evidence(traj, &settings.drop_sensors);
    let name = kind.label(settings);
    let start = Instant::now();
    let (report, csv, error) = match kind {
        FilterKind::Pf => {
            let seed = settings.seed.wrapping_add(PF_SEED_OFFSET);
            let (trace, error) = match run_particle_filter(
                &scenario.model,
                &scenario.initial,
                &modes,
                &evidence,
                settings.particles,
                seed,
            ) {
                Ok(t) => (t, None),
                Err((t, e)) => (t, Some(e)),
            };
            let views: Vec<StepView<'_>> = trace
                .steps
                .iter()
                .map(|s| StepView {
                    belief: &s.belief,
                    evaluations: settings.particles.max(1),
                    repairs: 0,
                    clipped: false,
                    evidence_ll: s.log_likelihood,
                    max_weight: Some(s.max_weight),
                    ess: Some(s.ess),
                })
                .collect();
            let (r, c) = summarize(name, scenario, traj, &views, error.as_ref());
            (r, c, error)
        }
        _ => {
            let mut filter: Box<dyn GaussianFilter> = match kind {
                FilterKind::Structured => Box::new(StructuredFilter::new(
                    &scenario.model,
                    settings.precision,
                    settings.kappa,
                )?),
                FilterKind::StructuredP(p) => Box::new(StructuredFilter::new(&scenario.model, p, settings.kappa)?),
                FilterKind::Ekf => Box::new(Ekf::new(&scenario.model)?),
                FilterKind::Uf => Box::new(MonolithicUf::new(&scenario.model, settings.kappa)?),
                FilterKind::Pf => unreachable!(),
            };
            let (trace, error) = match track_sequence(filter.as_mut(), &scenario.initial, &modes, &evidence) {
                Ok(t) => (t, None),
                Err(f) => {
                    let f = *f;
                    (f.trace, Some(f.error))
                }
            };
            let views: Vec<StepView<'_>> = trace
                .steps
                .iter()
                .map(|s| StepView {
                    belief: &s.belief,
                    evaluations: s.evaluations,
                    repairs: s.repairs,
                    clipped: s.clipped,
                    evidence_ll: s.log_likelihood,
                    max_weight: None,
                    ess: None,
                })
                .collect();
            let (r, c) = summarize(name, scenario, traj, &views, error.as_ref());
            (r, c, error)
        }
    };
    let seconds_per_step = start.elapsed().as_secs_f64() / traj.len().max(1) as f64;
    Ok(FilterRun {
        report,
        csv,
        seconds_per_step,
        error,
    })
}

/// Everything `compare` writes.
#[derive(Debug)]
pub struct CompareOutput {
    pub report: RunReport,
    pub truth_csv: String,
    pub runs: Vec<FilterRun>,
}

impl CompareOutput {
    /// First filter failure, if any.
    pub fn failure(&self) -> Option<(&str, &Error)> {
        self.runs
            .iter()
            .find_map(|r| r.error.as_ref().map(|e| (r.report.name.as_str(), e)))
    }

    /// `{filter: seconds per step}` as JSON.
    pub fn timing_json(&self) -> String {
        let map: BTreeMap<&str, f64> = self
            .runs
            .iter()
            .map(|r| (r.report.name.as_str(), r.seconds_per_step))
            .collect();
        serde_json::to_string_pretty(&map).unwrap() + "\n"
    }
}

/// Simulates one trajectory and runs every filter on identical evidence.
pub fn run_compare(scenario: &Scenario, settings: &Settings, filters: &[FilterKind]) -> Result<CompareOutput> {
    let traj = scenario.simulate(settings.seed, settings.steps)?;
    let mut runs = Vec::with_capacity(filters.len());
    for &kind in filters {
        runs.push(run_filter(scenario, settings, kind, &traj)?);
    }
    let report = RunReport {
        model: scenario.name.clone(),
        seed: settings.seed,
        steps: settings.steps,
        particles: settings.particles,
        dropped_sensors: settings.drop_sensors.clone(),
        focus: scenario.focus.clone(),
        filters: runs.iter().map(|r| r.report.clone()).collect(),
    };
    Ok(CompareOutput {
        report,
        truth_csv: truth_csv(&traj),
        runs,
    })
}

/// `step,variable,value` for every variable of a trajectory (step 0 holds the
/// initial persistent state).
pub fn truth_csv(traj: &Trajectory) -> String {
    let mut out = String::from("step,variable,value\n");
    for (name, v) in traj.persistent.iter().zip(&traj.initial) {
        writeln!(out, "0,{name},{v:.16e}").unwrap();
    }
    for (k, row) in traj.steps.iter().enumerate() {
        for (name, v) in traj.next.iter().zip(row) {
            writeln!(out, "{},{name},{v:.16e}", k + 1).unwrap();
        }
    }
    out
}

/// Mean, spread and range of a per-seed statistic.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Some(Self {
            mean,
            std: var.sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub status: String,
    pub failed_step: Option<usize>,
    pub focus_coverage: f64,
    pub focus_rmse: f64,
    pub mean_log_likelihood: f64,
    pub coverage: BTreeMap<String, f64>,
    pub degeneracy: Option<Degeneracy>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CalibrationFilter {
    pub name: String,
    pub coverage: BTreeMap<String, Spread>,
    pub focus_coverage: Option<Spread>,
    pub focus_rmse: Option<Spread>,
    pub mean_log_likelihood: Option<Spread>,
    pub seeds: Vec<SeedResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub model: String,
    pub steps: usize,
    pub particles: usize,
    pub focus: Vec<String>,
    pub filters: Vec<CalibrationFilter>,
}

/// Repeats simulate + track over seeds `settings.seed .. settings.seed + seeds`.
pub fn run_calibration(
    scenario: &Scenario,
    settings: &Settings,
    filters: &[FilterKind],
    seeds: usize,
) -> Result<CalibrationReport> {
    let mut per_filter: Vec<Vec<SeedResult>> = vec![Vec::new(); filters.len()];
    for i in 0..seeds as u64 {
        let seed = settings.seed + i;
        let s = Settings {
            seed,
            ..settings.clone()
        };
        let traj = scenario.simulate(seed, settings.steps)?;
        for (fi, &kind) in filters.iter().enumerate() {
            let run = run_filter(scenario, &s, kind, &traj)?;
            let r = run.report;
            per_filter[fi].push(SeedResult {
                seed,
                status: r.status,
                failed_step: r.failed_step,
                focus_coverage: r.focus_coverage,
                focus_rmse: r.focus_rmse,
                mean_log_likelihood: r.mean_log_likelihood,
                coverage: r.coverage,
                degeneracy: r.degeneracy,
            });
        }
    }
    let filters = filters
        .iter()
        .zip(per_filter)
        .map(|(&kind, mut seeds)| {
            seeds.sort_by_key(|s| s.seed);
            let ok: Vec<&SeedResult> = seeds.iter().filter(|s| s.status == "ok").collect();
            let mut coverage = BTreeMap::new();
            if let Some(first) = ok.first() {
                for var in first.coverage.keys() {
                    let vals: Vec<f64> = ok.iter().map(|s| s.coverage[var]).collect();
                    coverage.insert(var.clone(), Spread::of(&vals).unwrap());
                }
            }
            let stat = |f: fn(&SeedResult) -> f64| Spread::of(&ok.iter().map(|s| f(s)).collect::<Vec<_>>());
            CalibrationFilter {
                name: kind.label(settings),
                coverage,
                focus_coverage: stat(|s| s.focus_coverage),
                focus_rmse: stat(|s| s.focus_rmse),
                mean_log_likelihood: stat(|s| s.mean_log_likelihood),
                seeds,
            }
        })
        .collect();
    Ok(CalibrationReport {
        model: scenario.name.clone(),
        steps: settings.steps,
        particles: settings.particles,
        focus: scenario.focus.clone(),
        filters,
    })
}

/// The quadrature exactness table and whether every row passes.
pub fn quadrature_report() -> (Vec<ExactnessRow>, bool) {
    let rows = exactness_table();
    let ok = rows.iter().all(|r| r.pass);
    (rows, ok)
}

/// Fixed-width rendering of [`quadrature_report`].
pub fn render_quadrature_table(rows: &[ExactnessRow]) -> String {
    let mut out = format!(
        "{:>9} {:>3} {:>7} {:>8} {:>12}  {}\n",
        "precision", "d", "points", "expected", "max error", "result"
    );
    for r in rows {
        writeln!(
            out,
            "{:>9} {:>3} {:>7} {:>8} {:>12.3e}  {}",
            r.precision,
            r.dim,
            r.points,
            r.expected_points,
            r.max_error,
            if r.pass { "pass" } else { "FAIL" }
        )
        .unwrap();
    }
    writeln!(out, "tolerance {EXACTNESS_TOL:e}").unwrap();
    out
}
