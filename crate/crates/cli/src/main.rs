//! `dbnfilter` command-line tool.
//!
//! Exit codes: 0 on success, 1 on a runtime failure (the failing step is
//! printed on stderr), 2 on usage or configuration errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dbnfilter::config::Config;
use dbnfilter::experiment::{
    quadrature_report, render_quadrature_table, run_calibration, run_compare, FilterKind, Scenario, Settings,
};
use dbnfilter::{Error, Precision};

#[derive(Parser, Debug)]
#[command(
    name = "dbnfilter",
    version,
    about = "Simulate and track hybrid dynamic Bayesian networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a ground-truth trajectory.
    Simulate(Common),
    /// Simulate, then run the structured filter.
    Track(Common),
    /// Simulate once and run several filters on identical evidence.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated: structured, structured-p3, structured-p5, structured-p7, ekf, uf, pf.
        #[arg(long, default_value = "structured-p3,ekf,uf,pf", value_delimiter = ',', value_parser = filter_arg)]
        filters: Vec<FilterKind>,
    },
    /// Repeat simulate + track over consecutive seeds and summarize coverage.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "structured-p3", value_delimiter = ',', value_parser = filter_arg)]
        filters: Vec<FilterKind>,
        /// Number of seeds, starting at --seed.
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Print the cubature exactness table.
    Quadtest,
}

fn filter_arg(s: &str) -> Result<FilterKind, String> {
    s.trim().parse()
}

#[derive(Args, Debug)]
struct Common {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    particles: Option<usize>,
    /// Structured-filter precision (3, 5 or 7).
    #[arg(long, value_parser = precision_arg)]
    precision: Option<Precision>,
    #[arg(long, allow_hyphen_values = true)]
    kappa: Option<f64>,
    /// Comma-separated sensors withheld from the filters.
    #[arg(long, value_delimiter = ',')]
    drop_sensors: Vec<String>,
}

fn precision_arg(s: &str) -> Result<Precision, String> {
    let p: u32 = s.parse().map_err(|_| format!("invalid precision '{s}'"))?;
    Precision::try_from(p).map_err(|e| e.to_string())
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

fn io(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| io(&path, e))
}

fn setup(c: &Common) -> Result<(Scenario, Settings), Failure> {
    let cfg = match &c.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let (scenario, mut s) = Scenario::from_config(cfg)?;
    if let Some(v) = c.seed {
        s.seed = v;
    }
    if let Some(v) = c.steps {
        s.steps = v;
    }
    if let Some(v) = c.particles {
        s.particles = v;
    }
    if let Some(v) = c.precision {
        s.precision = v;
    }
    if c.kappa.is_some() {
        s.kappa = c.kappa;
    }
    if !c.drop_sensors.is_empty() {
        let sensors = scenario.model.sensors();
        if let Some(bad) = c.drop_sensors.iter().find(|d| !sensors.contains(d)) {
            return Err(Failure::Usage(format!("--drop-sensors: '{bad}' is not a sensor")));
        }
        s.drop_sensors = c.drop_sensors.clone();
    }
    fs::create_dir_all(&c.out).map_err(|e| io(&c.out, e))?;
    Ok((scenario, s))
}

fn compare(c: &Common, filters: &[FilterKind]) -> Result<(), Failure> {
    let (scenario, settings) = setup(c)?;
    let out = run_compare(&scenario, &settings, filters)?;
    write(&c.out, "truth.csv", &out.truth_csv)?;
    for run in &out.runs {
        write(&c.out, &format!("{}.csv", run.report.name), &run.csv)?;
    }
    let json = serde_json::to_string_pretty(&out.report).map_err(|e| Failure::Runtime(e.to_string()))?;
    write(&c.out, "report.json", &(json + "\n"))?;
    write(&c.out, "timing.json", &out.timing_json())?;
    match out.failure() {
        Some((name, e)) => Err(Failure::Runtime(format!("{name}: {e}"))),
        None => Ok(()),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate(c) => {
            let (scenario, settings) = setup(&c)?;
            let traj = scenario.simulate(settings.seed, settings.steps)?;
            write(&c.out, "truth.csv", &dbnfilter::experiment::truth_csv(&traj))
        }
        Command::Track(c) => compare(&c, &[FilterKind::Structured]),
        Command::Compare { common, filters } => compare(&common, &filters),
        Command::Calibrate { common, filters, seeds } => {
            let (scenario, settings) = setup(&common)?;
            let report = run_calibration(&scenario, &settings, &filters, seeds)?;
            let json = serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.to_string()))?;
            write(&common.out, "calibration.json", &(json + "\n"))
        }
        Command::Quadtest => {
            let (rows, ok) = quadrature_report();
            print!("{}", render_quadrature_table(&rows));
            if ok {
                Ok(())
            } else {
                Err(Failure::Runtime("exactness check failed".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
