//! Python bindings. The file-based commands mirror the `zsl` binary and
//! return its summary lines; a couple of numerical kernels are exposed
//! directly on nested lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use zsl_cli::config::parse_ks;
use zsl_cli::{commands, tune as cli_tune, CliError, Method, EXIT_IO, EXIT_NUMERICAL};
use zsl_core::eval::Scope;
use zsl_core::linalg::{self, SylvesterProblem};
use zsl_core::{matrix, ZslError};

fn py_err(e: CliError) -> PyErr {
    match e.code {
        EXIT_IO => PyOSError::new_err(e.message),
        EXIT_NUMERICAL => PyArithmeticError::new_err(e.message),
        _ => PyValueError::new_err(e.message),
    }
}

fn core_err(e: ZslError) -> PyErr {
    py_err(e.into())
}

fn method(name: &str) -> PyResult<Method> {
    name.parse::<Method>().map_err(py_err)
}

/// Write a synthetic dataset directory described by an INI run config.
#[pyfunction]
fn synth(spec: PathBuf, out: PathBuf) -> PyResult<Vec<String>> {
    commands::synth(&spec, &out).map_err(py_err)
}

#[pyfunction]
fn train(method_name: &str, data: PathBuf, config: PathBuf, out: PathBuf) -> PyResult<Vec<String>> {
    commands::train(method(method_name)?, &data, &config, &out).map_err(py_err)
}

/// Evaluate a trained bundle. `k` is a list of cutoffs.
#[pyfunction]
#[pyo3(signature = (model, data, scope = "czsl", k = vec![1]))]
fn evaluate(model: PathBuf, data: PathBuf, scope: &str, k: Vec<usize>) -> PyResult<Vec<String>> {
    let scope: Scope = scope.parse().map_err(core_err)?;
    let joined = k.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    let ks = parse_ks(&joined).map_err(|m| py_err(CliError::config(m)))?;
    commands::eval(&model, &data, scope, &ks).map_err(py_err)
}

#[pyfunction]
fn tune(method_name: &str, data: PathBuf, grid: &str) -> PyResult<Vec<String>> {
    cli_tune::tune(method(method_name)?, &data, grid).map_err(py_err)
}

/// Solve `L W + W R + M = 0`; matrices are lists of rows.
#[pyfunction]
fn solve_sylvester(l: Vec<Vec<f64>>, r: Vec<Vec<f64>>, m: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let conv = |rows: &[Vec<f64>]| matrix::from_rows(rows).map_err(core_err);
    let problem = SylvesterProblem::new(conv(&l)?, conv(&r)?, conv(&m)?).map_err(core_err)?;
    let w = linalg::solve_sylvester(&problem).map_err(core_err)?;
    Ok(w.row_iter().map(|row| row.iter().copied().collect()).collect())
}

#[pyfunction]
fn harmonic_mean(unseen: f64, seen: f64) -> f64 {
    zsl_core::eval::harmonic_mean(unseen, seen)
}

#[pymodule]
fn zslkit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(tune, m)?)?;
    m.add_function(wrap_pyfunction!(solve_sylvester, m)?)?;
    m.add_function(wrap_pyfunction!(harmonic_mean, m)?)?;
    Ok(())
}
