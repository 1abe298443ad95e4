//! Python bindings for running experiments and checking their outputs.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use langrl_core::harness::{self, HarnessError, RunConfig, PROFILES};
use langrl_core::pipelines::validate_sft_file;

fn harness_err(e: HarnessError) -> PyErr {
    match e {
        HarnessError::Config(_) => PyValueError::new_err(e.to_string()),
        HarnessError::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_py(py: Python<'_>, value: &impl serde::Serialize) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

#[pyfunction]
fn version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

#[pyfunction]
fn profiles() -> Vec<&'static str> {
    PROFILES.to_vec()
}

/// Resolves a config from a profile or file plus `section.key` overrides and
/// returns it as INI text.
#[pyfunction]
#[pyo3(signature = (profile=None, config=None, overrides=None))]
fn resolve_config(
    profile: Option<&str>,
    config: Option<PathBuf>,
    overrides: Option<BTreeMap<String, String>>,
) -> PyResult<String> {
    Ok(build_config(profile, config, overrides)?.to_string())
}

fn build_config(
    profile: Option<&str>,
    config: Option<PathBuf>,
    overrides: Option<BTreeMap<String, String>>,
) -> PyResult<RunConfig> {
    let mut cfg = match (profile, config) {
        (Some(p), None) => RunConfig::profile(p),
        (None, Some(path)) => RunConfig::parse_file(&path),
        (None, None) => Ok(RunConfig::default()),
        (Some(_), Some(_)) => return Err(PyValueError::new_err("pass either profile or config, not both")),
    }
    .map_err(|e| PyValueError::new_err(e.to_string()))?;
    for (k, v) in overrides.unwrap_or_default() {
        cfg.set(&k, &v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    }
    Ok(cfg)
}

/// Runs (or resumes) an experiment and returns its summary as a dict.
#[pyfunction]
#[pyo3(signature = (profile=None, config=None, overrides=None))]
fn run(
    py: Python<'_>,
    profile: Option<&str>,
    config: Option<PathBuf>,
    overrides: Option<BTreeMap<String, String>>,
) -> PyResult<Py<PyAny>> {
    let cfg = build_config(profile, config, overrides)?;
    let summary = py.detach(|| harness::run_experiment(&cfg)).map_err(harness_err)?;
    to_py(py, &summary)
}

/// Checks an SFT JSONL file; returns records, max_chars and violations.
#[pyfunction]
fn validate_sft(py: Python<'_>, path: PathBuf) -> PyResult<Py<PyAny>> {
    let report = validate_sft_file(&path).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?;
    to_py(py, &report)
}

#[pyfunction]
fn tree_digest(path: PathBuf) -> PyResult<String> {
    harness::tree_digest(&path).map_err(harness_err)
}

/// Runs the command line with `argv` (program name excluded) and returns the exit code.
#[pyfunction]
fn cli(py: Python<'_>, argv: Vec<String>) -> i32 {
    py.detach(|| harness::cli_run(std::iter::once("langrl".to_string()).chain(argv)))
}

#[pymodule]
fn langrl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(version, m)?)?;
    m.add_function(wrap_pyfunction!(profiles, m)?)?;
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(validate_sft, m)?)?;
    m.add_function(wrap_pyfunction!(tree_digest, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    Ok(())
}
