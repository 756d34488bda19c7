//! Python bindings. Configs and field descriptors are passed as TOML or JSON text.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use msfem::analysis::{self, StudyConfig};
use msfem::cell;
use msfem::coeff::{self, FieldDescriptor};
use msfem::config::{parse_config, SolveConfig};

create_exception!(msfem_py, MsfemError, PyException);

fn err(e: msfem::MsfemError) -> PyErr {
    MsfemError::new_err(e.to_string())
}

fn field_from(text: &str) -> PyResult<coeff::CoefficientField> {
    let d: FieldDescriptor = parse_config(text, None).map_err(err)?;
    d.build().map_err(err)
}

/// Homogenized tensor of a field, row-major `(2m) x (2m)`.
#[pyfunction]
#[pyo3(signature = (field, n_cell = 64))]
fn homogenized_tensor(field: &str, n_cell: usize) -> PyResult<Vec<Vec<f64>>> {
    let f = field_from(field)?;
    let chi = cell::solve_corrector(&f, n_cell).map_err(err)?;
    let t = cell::homogenized_tensor(&f, &chi).map_err(err)?.tensor;
    let dm = t.dm();
    Ok((0..dm).map(|r| (0..dm).map(|c| t.at(r, c)).collect()).collect())
}

/// `(lambda, Lambda)` sampled on a grid of the cell.
#[pyfunction]
#[pyo3(signature = (field, n_samples = 1024, n_directions = 16))]
fn ellipticity_bounds(field: &str, n_samples: usize, n_directions: usize) -> PyResult<(f64, f64)> {
    let f = field_from(field)?;
    let b = coeff::check_ellipticity(&f, n_samples, n_directions).map_err(err)?;
    Ok((b.lambda, b.big_lambda))
}

/// Least-squares slope of `log y` against `log x`: `(slope, intercept, residual)`.
#[pyfunction]
fn fit_rate(points: Vec<(f64, f64)>) -> PyResult<(f64, f64, f64)> {
    let f = analysis::fit_rate(&points).map_err(err)?;
    Ok((f.slope, f.intercept, f.residual))
}

#[pyclass(module = "msfem_py", get_all)]
struct Solution {
    /// Coarse vertex coordinates.
    vertices: Vec<(f64, f64)>,
    /// Coefficients, `m` per vertex.
    coefficients: Vec<f64>,
    m: usize,
    iterations: usize,
    residual: f64,
    broken_h1_norm: f64,
}

/// Runs one coarse solve from a solve config.
#[pyfunction]
#[pyo3(signature = (config, cache = None))]
fn solve(py: Python<'_>, config: &str, cache: Option<PathBuf>) -> PyResult<Solution> {
    let cfg: SolveConfig = parse_config(config, None).map_err(err)?;
    let out = py
        .detach(|| analysis::run_solve(&cfg, cache.as_deref()))
        .map_err(err)?;
    Ok(Solution {
        vertices: out.basis.coarse.vertices().iter().map(|v| (v[0], v[1])).collect(),
        m: out.basis.m,
        iterations: out.solution.report.iterations,
        residual: out.solution.report.residual,
        broken_h1_norm: msfem::msfem::broken_h1_norm(&out.solution, &out.basis),
        coefficients: out.solution.coefficients,
    })
}

#[pyclass(module = "msfem_py", get_all)]
struct Study {
    csv: String,
    /// Slopes, flags and reference details as JSON text.
    summary: String,
    resonance: bool,
    complete: bool,
}

/// Runs a convergence study from a study config.
#[pyfunction]
#[pyo3(signature = (config, workers = 1, cache = None))]
fn run_study(py: Python<'_>, config: &str, workers: usize, cache: Option<PathBuf>) -> PyResult<Study> {
    let cfg: StudyConfig = parse_config(config, None).map_err(err)?;
    cfg.validate().map_err(err)?;
    let r = py
        .detach(|| analysis::run_study(&cfg, workers, cache.as_deref()))
        .map_err(err)?;
    Ok(Study {
        csv: r.to_csv(),
        summary: r.summary_json().to_string(),
        resonance: r.resonance,
        complete: r.complete,
    })
}

#[pymodule]
fn msfem_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("MsfemError", m.py().get_type::<MsfemError>())?;
    m.add_class::<Solution>()?;
    m.add_class::<Study>()?;
    m.add_function(wrap_pyfunction!(homogenized_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(ellipticity_bounds, m)?)?;
    m.add_function(wrap_pyfunction!(fit_rate, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(run_study, m)?)?;
    Ok(())
}
