//! Python bindings. Results cross the boundary as JSON strings so the Python
//! side needs nothing beyond the standard library.

use std::path::PathBuf;

use meanflow::flow::GradientFault;
use meanflow::harness::acceptance::{run_acceptance, AcceptanceOptions};
use meanflow::harness::checks::grad_check_prepared;
use meanflow::harness::experiment::Prepared;
use meanflow::harness::{run_experiment, ExperimentConfig};
use meanflow::value::dp_optimal;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn runtime<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn parse(config_json: &str, seed: Option<u64>) -> PyResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_json(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Validate a config; returns its hash.
#[pyfunction]
#[pyo3(signature = (config_json, seed=None))]
fn validate(config_json: &str, seed: Option<u64>) -> PyResult<String> {
    Ok(parse(config_json, seed)?.hash())
}

/// Run an experiment and return the summary as JSON.
#[pyfunction]
#[pyo3(signature = (config_json, seed=None, out=None))]
fn run(py: Python<'_>, config_json: &str, seed: Option<u64>, out: Option<PathBuf>) -> PyResult<String> {
    let cfg = parse(config_json, seed)?;
    let res = py.detach(|| run_experiment(&cfg, out.as_deref(), GradientFault::None)).map_err(runtime)?;
    serde_json::to_string(&res.summary).map_err(runtime)
}

/// Finite-difference gradient check; returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (config_json, probes=50, seed=None))]
fn check_grad(py: Python<'_>, config_json: &str, probes: usize, seed: Option<u64>) -> PyResult<String> {
    let cfg = parse(config_json, seed)?;
    let check = py
        .detach(|| {
            let prep = Prepared::new(&cfg)?;
            grad_check_prepared(&prep, probes, cfg.seed, GradientFault::None)
        })
        .map_err(runtime)?;
    serde_json::to_string(&check).map_err(runtime)
}

/// Optimal value of the configured environment's augmented model.
#[pyfunction]
#[pyo3(signature = (config_json, m=None))]
fn solve_dp(config_json: &str, m: Option<f64>) -> PyResult<f64> {
    let cfg = parse(config_json, None)?;
    let base = meanflow::harness::envs::build_env(&cfg.env).map_err(runtime)?;
    let aug = base.augment().map_err(runtime)?;
    Ok(dp_optimal(&aug, m.unwrap_or(f64::INFINITY)).map_err(runtime)?.value)
}

/// Run the acceptance suite on a config directory; returns one line per criterion.
#[pyfunction]
#[pyo3(signature = (config_dir, out=None))]
fn acceptance(py: Python<'_>, config_dir: PathBuf, out: Option<PathBuf>) -> PyResult<Vec<String>> {
    let opts = AcceptanceOptions { config_dir, out, fault: GradientFault::None };
    let report = py.detach(|| run_acceptance(&opts)).map_err(runtime)?;
    Ok(report.lines())
}

#[pymodule]
fn meanflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(check_grad, m)?)?;
    m.add_function(wrap_pyfunction!(solve_dp, m)?)?;
    m.add_function(wrap_pyfunction!(acceptance, m)?)?;
    Ok(())
}
