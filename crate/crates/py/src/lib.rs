//! Python bindings: scenario commands, the simulator as a measurement
//! function, metrics, coloring and the bound QP.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use odcal::calibration::{compute_metrics, TrafficModel};
use odcal::cli::{self, CalibrateOptions, ScenarioFile, ScenarioModel};
use odcal::error::{Error, ErrorClass};
use odcal::filter::solve_bound_qp;
use odcal::gradient::{multi_start_color, GradientMode, IncidenceMatrix};
use odcal::statespace::MeasurementNoiseModel;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e.class() {
        ErrorClass::Input => PyValueError::new_err(e.to_string()),
        ErrorClass::Io => PyOSError::new_err(e.to_string()),
        ErrorClass::Numerical | ErrorClass::Convergence => PyRuntimeError::new_err(e.to_string()),
    }
}

fn load(path: &str) -> PyResult<ScenarioFile> {
    ScenarioFile::load(&PathBuf::from(path)).map_err(to_py)
}

/// Writes demand, counts and travel-time CSVs for one seed; returns the seed used.
#[pyfunction]
#[pyo3(signature = (scenario, out_dir, seed=None))]
fn generate(scenario: &str, out_dir: &str, seed: Option<u64>) -> PyResult<u64> {
    let s = load(scenario)?;
    Ok(cli::generate(&s, seed, &PathBuf::from(out_dir)).map_err(to_py)?.seed)
}

/// Prepares inputs, calibrates one test day and writes the run files.
/// Returns the evaluation summary and RMSN per horizon (0 = estimation).
#[pyfunction]
#[pyo3(signature = (scenario, out_dir, degree=None, gradient=None, constrained=None, seed=None))]
fn calibrate<'py>(
    py: Python<'py>,
    scenario: &str,
    out_dir: &str,
    degree: Option<usize>,
    gradient: Option<&str>,
    constrained: Option<bool>,
    seed: Option<u64>,
) -> PyResult<Bound<'py, PyDict>> {
    let text = std::fs::read_to_string(scenario).map_err(|e| to_py(e.into()))?;
    let s = ScenarioFile::parse(&text).map_err(to_py)?;
    let gradient = match gradient {
        None => None,
        Some("fd") => Some(GradientMode::Fd),
        Some("psp") => Some(GradientMode::Psp),
        Some(other) => return Err(PyValueError::new_err(format!("gradient must be 'fd' or 'psp', got {other:?}"))),
    };
    let opts = CalibrateOptions {
        degree,
        gradient,
        constrained,
        seed,
        ..CalibrateOptions::default()
    };
    let summary = py
        .detach(|| cli::calibrate(&s, &text, &opts, &PathBuf::from(out_dir)))
        .map_err(to_py)?;
    let e = &summary.evaluation;
    let out = PyDict::new(py);
    out.set_item("ods", e.ods)?;
    out.set_item("parameter_groups", e.parameter_groups)?;
    out.set_item("evaluations_per_sweep", e.evaluations_per_sweep)?;
    out.set_item("fd_evaluations_per_sweep", e.fd_evaluations_per_sweep)?;
    out.set_item("gradient_evaluations", e.gradient_evaluations)?;
    let rmsn: Vec<f64> = summary.metrics.horizons.iter().map(|h| h.metrics.overall.rmsn).collect();
    out.set_item("rmsn", rmsn)?;
    out.set_item("estimates", summary.estimates)?;
    Ok(out)
}

/// Sensor readings for consecutive intervals of OD flows, from an empty
/// network. Flows are vehicles per interval.
#[pyfunction]
fn simulate(py: Python<'_>, scenario: &str, flows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let s = load(scenario)?;
    let model = s.model().map_err(to_py)?;
    py.detach(|| match &model {
        ScenarioModel::Simulator(m) => m.run(&m.initial_state(), &flows),
        ScenarioModel::Linear(m) => m.run(&m.initial_state(), &flows),
    })
    .map_err(to_py)
}

/// Distinguishable OD pairs for degrees `1..=max_degree`.
#[pyfunction]
fn observability(scenario: &str, max_degree: usize) -> PyResult<Vec<usize>> {
    let s = load(scenario)?;
    let network = s.network().map_err(to_py)?;
    Ok(odcal::calibration::observability_curve(&network, s.horizon.interval_s, max_degree))
}

/// Colors the conflict graph of an incidence given as one column list per
/// measurement row. Returns one color per parameter.
#[pyfunction]
#[pyo3(signature = (rows, num_params, starts=30, seed=1))]
fn color(rows: Vec<Vec<usize>>, num_params: usize, starts: usize, seed: u64) -> PyResult<Vec<usize>> {
    let incidence = IncidenceMatrix::from_rows(rows, num_params).map_err(to_py)?;
    Ok(multi_start_color(&incidence, starts, seed).map_err(to_py)?.colors().to_vec())
}

/// RMSE, WSSE and RMSN of aligned `[interval][sensor]` rows.
#[pyfunction]
fn metrics<'py>(
    py: Python<'py>,
    estimated: Vec<Vec<f64>>,
    observed: Vec<Vec<f64>>,
    variances: Vec<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let noise = MeasurementNoiseModel::with_exact(variances).map_err(to_py)?;
    let m = compute_metrics(&estimated, &observed, &noise).map_err(to_py)?.overall;
    let out = PyDict::new(py);
    out.set_item("rmse", m.rmse)?;
    out.set_item("wsse", m.wsse)?;
    out.set_item("rmsn", m.rmsn)?;
    out.set_item("observations", m.observations)?;
    Ok(out)
}

/// Projects `mean` onto `z >= lower` in the metric of `cov` (row-major lists).
#[pyfunction]
#[pyo3(signature = (mean, cov, lower, tolerance=1e-10, max_iterations=0))]
fn project_bounds(
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
    lower: Vec<f64>,
    tolerance: f64,
    max_iterations: usize,
) -> PyResult<Vec<f64>> {
    let n = mean.len();
    if cov.len() != n || cov.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err(format!("cov must be {n} x {n}")));
    }
    let cov = DMatrix::from_fn(n, n, |i, j| cov[i][j]);
    let cap = if max_iterations == 0 { 10 * n + 10 } else { max_iterations };
    let sol = solve_bound_qp(
        &DVector::from_vec(mean),
        &cov,
        &DVector::from_vec(lower),
        tolerance,
        cap,
    )
    .map_err(to_py)?;
    Ok(sol.z.as_slice().to_vec())
}

#[pymodule]
fn pyodcal(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(observability, m)?)?;
    m.add_function(wrap_pyfunction!(color, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(project_bounds, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
