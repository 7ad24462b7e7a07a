//! Command-line front end: scenario files, data generation, calibration runs,
//! coloring, observability and metrics export.

mod commands;
mod scenario;

pub use commands::{
    calibrate, color, generate, metrics, observability, CalibrateOptions, CalibrateSummary, ColorReport,
    EvaluationSummary, GenerateSummary,
};
pub use scenario::{
    DemandSpec, ExplicitNetwork, FilterSpec, HorizonSpec, IncidenceSource, LinearSpec, NetworkSpec, OdSpec,
    Preparation, RouteSpec, ScenarioFile, ScenarioModel, SegmentSpec, Seeds, SensorSpec, Splits,
};

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::{Error, ErrorClass, Result};
use crate::gradient::GradientMode;

/// Exit status for errors of each class.
pub fn exit_code(error: &Error) -> i32 {
    match error.class() {
        ErrorClass::Input => 2,
        ErrorClass::Numerical => 3,
        ErrorClass::Convergence => 4,
        ErrorClass::Io => 5,
    }
}

#[derive(Debug, Parser)]
#[command(name = "odcal", version, about = "Online OD demand calibration with a mesoscopic simulator")]
pub struct Cli {
    /// Worker threads for perturbation sweeps (all cores by default).
    #[arg(long, global = true, env = "ODCAL_WORKERS")]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, env = "ODCAL_OUT_DIR", default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GradientArg {
    Fd,
    Psp,
}

impl From<GradientArg> for GradientMode {
    fn from(g: GradientArg) -> Self {
        match g {
            GradientArg::Fd => GradientMode::Fd,
            GradientArg::Psp => GradientMode::Psp,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one demand realisation: demand, counts and travel times.
    Generate {
        scenario: PathBuf,
        /// Demand seed; the scenario's `seeds.generate` by default.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Prepare inputs on the training days and calibrate a test day online.
    Calibrate {
        scenario: PathBuf,
        #[arg(long)]
        degree: Option<usize>,
        #[arg(long, value_enum)]
        gradient: Option<GradientArg>,
        /// Project estimates onto nonnegative OD flows.
        #[arg(long, conflicts_with = "unconstrained")]
        constrained: bool,
        #[arg(long)]
        unconstrained: bool,
        /// Demand seed of the test day; the first test split by default.
        #[arg(long, conflicts_with = "observed")]
        seed: Option<u64>,
        /// Sensor counts CSV to calibrate against.
        #[arg(long)]
        observed: Option<PathBuf>,
        /// True demand CSV matching `--observed`.
        #[arg(long, requires = "observed")]
        demand: Option<PathBuf>,
    },
    /// Color an incidence file for partitioned perturbation.
    Color {
        incidence: PathBuf,
        /// Random orderings tried.
        #[arg(long, default_value_t = 30)]
        starts: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Distinguishable OD pairs per augmentation degree.
    Observability {
        scenario: PathBuf,
        #[arg(long, default_value_t = 8)]
        max_degree: usize,
    },
    /// Recompute metrics from a calibration run directory.
    Metrics { run: PathBuf },
}

/// Runs one parsed command and prints its summary.
pub fn run(cli: Cli) -> Result<()> {
    if let Some(workers) = cli.workers {
        if workers == 0 {
            return Err(Error::InvalidArgument("--workers must be >= 1".into()));
        }
        // Fails only when a pool already exists, which keeps the old one.
        if rayon::ThreadPoolBuilder::new().num_threads(workers).build_global().is_err() {
            log::warn!("worker pool already initialised; --workers ignored");
        }
    }
    let out = cli.out;
    match cli.command {
        Command::Generate { scenario, seed } => {
            let s = ScenarioFile::load(&scenario)?;
            let g = generate(&s, seed, &out)?;
            println!(
                "generated seed {}: {} intervals x {} sensors, {:.1} vehicles counted -> {}",
                g.seed,
                g.intervals,
                g.sensors,
                g.total_count,
                out.display()
            );
        }
        Command::Calibrate {
            scenario,
            degree,
            gradient,
            constrained,
            unconstrained,
            seed,
            observed,
            demand,
        } => {
            let text = std::fs::read_to_string(&scenario)?;
            let s = ScenarioFile::parse(&text)?;
            let opts = CalibrateOptions {
                degree,
                gradient: gradient.map(Into::into),
                constrained: match (constrained, unconstrained) {
                    (true, _) => Some(true),
                    (_, true) => Some(false),
                    _ => None,
                },
                seed,
                observed,
                demand,
            };
            let c = calibrate(&s, &text, &opts, &out)?;
            let e = &c.evaluation;
            println!(
                "{:?}: {} ODs in {} groups, {} evaluations per sweep (FD {}), {} sweeps, {} evaluations",
                e.mode, e.ods, e.parameter_groups, e.evaluations_per_sweep, e.fd_evaluations_per_sweep, e.sweeps,
                e.gradient_evaluations
            );
            print_rmsn(&c.metrics);
        }
        Command::Color { incidence, starts, seed } => {
            let r = color(&incidence, starts, seed, &out)?;
            println!(
                "{} x {} incidence, {} nonzeros: {} colors (conflict degree min {} mean {:.2} max {})",
                r.measurements, r.ods, r.nonzeros, r.colors, r.conflict_degree_min, r.conflict_degree_mean,
                r.conflict_degree_max
            );
        }
        Command::Observability { scenario, max_degree } => {
            let s = ScenarioFile::load(&scenario)?;
            for (r, count) in observability(&s, max_degree, &out)?.iter().enumerate() {
                println!("degree {}: {count}", r + 1);
            }
        }
        Command::Metrics { run } => print_rmsn(&metrics(&run, &out)?),
    }
    Ok(())
}

fn print_rmsn(report: &crate::calibration::MetricsReport) {
    for h in &report.horizons {
        let label = if h.horizon == 0 {
            "estimation".to_string()
        } else {
            format!("{}-step", h.horizon)
        };
        println!("{label}: RMSN {:.4}", h.metrics.overall.rmsn);
    }
}
