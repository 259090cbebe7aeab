//! Python bindings. Inputs and outputs are plain lists, floats and dicts;
//! structured results cross the boundary as JSON and come back as dicts.

use std::path::Path;

use hiergcd_core::config::ExperimentConfig;
use hiergcd_core::experiment::load_or_generate;
use hiergcd_core::numerics::{Tape, Tensor2};
use hiergcd_core::schedule::RampSchedule;
use hiergcd_core::{eval, target, trainer, Error};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;
use serde::Serialize;

fn py_err(e: Error) -> PyErr {
    if e.is_config() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn config(text: Option<&str>) -> PyResult<ExperimentConfig> {
    match text {
        Some(t) => ExperimentConfig::parse(t, Path::new("<python>")).map_err(py_err),
        None => Ok(ExperimentConfig::default()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor2> {
    Tensor2::from_rows(rows).map_err(py_err)
}

/// The default experiment configuration as TOML text.
#[pyfunction]
fn default_config() -> PyResult<String> {
    ExperimentConfig::default().to_toml().map_err(py_err)
}

#[derive(Serialize)]
struct GeneratedData {
    dim: usize,
    num_classes: usize,
    num_super: usize,
    features: Vec<Vec<f64>>,
    targets: Vec<usize>,
    coarse: Vec<usize>,
    labeled: Vec<bool>,
    seen_classes: Vec<usize>,
    novel_classes: Vec<usize>,
}

/// Generates and splits the dataset described by a TOML config (defaults
/// when omitted).
#[pyfunction]
#[pyo3(signature = (config_toml=None))]
fn generate<'py>(py: Python<'py>, config_toml: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config(config_toml)?;
    let (ds, part) = load_or_generate(&cfg).map_err(py_err)?;
    let out = GeneratedData {
        dim: ds.dim,
        num_classes: ds.num_classes,
        num_super: ds.num_super,
        features: ds.instances.iter().map(|i| i.features.clone()).collect(),
        targets: ds.instances.iter().map(|i| i.target).collect(),
        coarse: ds.instances.iter().map(|i| i.coarse).collect(),
        labeled: ds.instances.iter().map(|i| i.is_labeled).collect(),
        seen_classes: part.seen_classes(),
        novel_classes: part.novel_classes(),
    };
    to_py(py, &out)
}

#[derive(Serialize)]
struct TrainResult {
    report: eval::EvalReport,
    history: Vec<trainer::EpochMetrics>,
}

/// Trains one run. With `out_dir`, metrics and checkpoints are written
/// there as the CLI would. Returns `{"report": ..., "history": [...]}`.
#[pyfunction]
#[pyo3(signature = (config_toml=None, out_dir=None))]
fn train<'py>(py: Python<'py>, config_toml: Option<&str>, out_dir: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config(config_toml)?;
    let out = py
        .detach(|| {
            let (ds, part) = load_or_generate(&cfg)?;
            trainer::train(&cfg.train_config(), &ds, &part, out_dir.map(Path::new))
        })
        .map_err(py_err)?;
    to_py(
        py,
        &TrainResult {
            report: out.report,
            history: out.history,
        },
    )
}

/// Clustering accuracy under the best cluster-to-class matching. Adds the
/// coarse-mapped accuracy when `class_to_super` is given.
#[pyfunction]
#[pyo3(signature = (preds, truths, seen, num_classes, class_to_super=None))]
fn evaluate<'py>(
    py: Python<'py>,
    preds: Vec<usize>,
    truths: Vec<usize>,
    seen: Vec<bool>,
    num_classes: usize,
    class_to_super: Option<Vec<usize>>,
) -> PyResult<Bound<'py, PyAny>> {
    let report = match class_to_super {
        Some(map) => eval::evaluate(&preds, &truths, &seen, num_classes, &map),
        None => eval::clustering_acc(&preds, &truths, &seen, num_classes),
    }
    .map_err(py_err)?;
    to_py(py, &report)
}

/// Minimum-cost assignment of a square matrix; `result[row] = column`.
#[pyfunction]
fn hungarian(cost: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
    eval::hungarian(&cost).map_err(py_err)
}

/// Cosine ramp weight at a 1-based epoch.
#[pyfunction]
fn ramp_weight(start: u32, end: u32, lambda_final: f64, epoch: u32) -> PyResult<f64> {
    Ok(RampSchedule::new(start, end, lambda_final).map_err(py_err)?.weight(epoch))
}

/// Supervised contrastive loss over L2-normalised embeddings.
#[pyfunction]
#[pyo3(signature = (z, labels, tau=0.07))]
fn supcon_loss(z: Vec<Vec<f64>>, labels: Vec<usize>, tau: f64) -> PyResult<f64> {
    let tape = Tape::new();
    let z = tape.constant(matrix(&z)?);
    let loss = target::supcon_loss(z, &labels, tau).map_err(py_err)?;
    loss.loss.item().map_err(py_err)
}

/// Self-supervised contrastive loss between two views of a batch.
#[pyfunction]
#[pyo3(signature = (z, z_aug, tau=0.5, literal=false))]
fn selfcon_loss(z: Vec<Vec<f64>>, z_aug: Vec<Vec<f64>>, tau: f64, literal: bool) -> PyResult<f64> {
    let tape = Tape::new();
    let z = tape.constant(matrix(&z)?);
    let za = tape.constant(matrix(&z_aug)?);
    target::selfcon_loss(z, za, tau, literal).and_then(|l| l.item()).map_err(py_err)
}

#[pymodule]
fn hiergcd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(ramp_weight, m)?)?;
    m.add_function(wrap_pyfunction!(supcon_loss, m)?)?;
    m.add_function(wrap_pyfunction!(selfcon_loss, m)?)?;
    Ok(())
}
