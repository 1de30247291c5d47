//! Python bindings: the metrics, the character-histogram and stand-in
//! embeddings, the complexity profiler, synthetic data generation, and a
//! train/evaluate round trip.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use ocrfuse::complexity::{empirical_count as measure_count, symbolic_count, ComplexityQuery, ModelKind};
use ocrfuse::features;
use ocrfuse::harness::checkpoint;
use ocrfuse::harness::checks;
use ocrfuse::harness::data;
use ocrfuse::harness::synth::{self, SyntheticTaskSpec};
use ocrfuse::harness::train::{self, TrainConfig};
use ocrfuse::objectives;

fn to_py_err(e: ocrfuse::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Unit-cost Levenshtein distance between two strings.
#[pyfunction]
fn edit_distance(s1: &str, s2: &str) -> usize {
    objectives::edit_distance(s1, s2)
}

/// Normalized Levenshtein similarity in [0, 1] (case-insensitive, trimmed).
#[pyfunction]
fn anls(s1: &str, s2: &str) -> f64 {
    objectives::anls(s1, s2)
}

/// 604-dim binary pyramidal character histogram of a word.
#[pyfunction]
fn phoc_encode(text: &str) -> Vec<f64> {
    features::phoc_encode(text)
}

/// Deterministic 300-dim hashed word embedding (unit norm).
#[pyfunction]
fn word_embedding(text: &str) -> Vec<f64> {
    features::stand_in_word_embedding(text)
}

/// Closed-form encoder operation counts. `model` is "m4c" or "ours".
#[pyfunction]
#[pyo3(signature = (model, l=20, n=50, m=100, layers=None, include_d=false, d=768))]
#[allow(clippy::too_many_arguments)]
fn complexity<'py>(
    py: Python<'py>,
    model: &str,
    l: u64,
    n: u64,
    m: u64,
    layers: Option<u64>,
    include_d: bool,
    d: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let kind = match model {
        "m4c" => ModelKind::M4cStyle,
        "ours" => ModelKind::SixVector,
        other => return Err(PyValueError::new_err(format!("unknown model {other:?}"))),
    };
    let layers = layers.unwrap_or(match kind {
        ModelKind::M4cStyle => 4,
        ModelKind::SixVector => 8,
    });
    let q = ComplexityQuery { model: kind, l, n, m, layers, include_d, d };
    let r = symbolic_count(&q);
    let out = PyDict::new(py);
    out.set_item("attention_block_ops", r.attention_block_ops)?;
    out.set_item("transformer_per_layer_ops", r.transformer_per_layer_ops)?;
    out.set_item("transformer_total_ops", r.transformer_total_ops)?;
    out.set_item("total_ops", r.total_ops)?;
    Ok(out)
}

/// Instrumented multiply-add tally of the encoder forward pass.
#[pyfunction]
#[pyo3(signature = (model, d=1, layers=8, l=20, n=50, m=100, seed=0))]
fn empirical_count(model: &str, d: usize, layers: usize, l: usize, n: usize, m: usize, seed: u64) -> PyResult<u64> {
    let kind = match model {
        "m4c" => ModelKind::M4cStyle,
        "ours" => ModelKind::SixVector,
        other => return Err(PyValueError::new_err(format!("unknown model {other:?}"))),
    };
    measure_count(kind, d, layers, l, n, m, seed).map_err(to_py_err)
}

/// Generate a synthetic dataset from a task-spec JSON string; writes JSONL
/// and returns the instance count.
#[pyfunction]
fn gen_data(spec_json: &str, out_path: PathBuf) -> PyResult<usize> {
    let spec: SyntheticTaskSpec =
        serde_json::from_str(spec_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let instances = synth::gen_synthetic(&spec).map_err(to_py_err)?;
    data::write_jsonl(&out_path, &instances).map_err(to_py_err)?;
    Ok(instances.len())
}

/// Train from a config JSON string on a JSONL dataset; writes a checkpoint
/// and returns (iterations, final_loss, final_accuracy_or_None).
#[pyfunction]
fn train_model(
    config_json: &str,
    data_path: PathBuf,
    ckpt_path: PathBuf,
) -> PyResult<(usize, f64, Option<f64>)> {
    let cfg: TrainConfig =
        serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let dataset = data::read_jsonl(&data_path, &cfg.encoder).map_err(to_py_err)?;
    let outcome = train::train(&cfg, &dataset).map_err(to_py_err)?;
    checkpoint::save(&ckpt_path, &outcome.checkpoint).map_err(to_py_err)?;
    let last = outcome.metrics.last().expect("at least one iteration");
    Ok((last.iteration + 1, last.loss, outcome.final_accuracy))
}

/// Evaluate a checkpoint on a JSONL dataset: returns a dict with accuracy,
/// mean ANLS and per-instance predictions.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, ckpt_path: PathBuf, data_path: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let ckpt = checkpoint::load(&ckpt_path).map_err(to_py_err)?;
    let (model, store, vocab) = train::model_from_checkpoint(&ckpt).map_err(to_py_err)?;
    let mut read_cfg = model.cfg.clone();
    read_cfg.n_max = read_cfg.n_max.max(50);
    read_cfg.m_max = read_cfg.m_max.max(100);
    let dataset = data::read_jsonl(&data_path, &read_cfg).map_err(to_py_err)?;
    let report = train::evaluate(&model, &store, &vocab, &dataset).map_err(to_py_err)?;
    let out = PyDict::new(py);
    out.set_item("accuracy", report.accuracy)?;
    out.set_item("mean_anls", report.mean_anls)?;
    let rows = PyList::empty(py);
    for row in &report.rows {
        let r = PyDict::new(py);
        r.set_item("id", &row.id)?;
        r.set_item("prediction", &row.prediction)?;
        r.set_item("correct", row.correct)?;
        r.set_item("anls", row.anls)?;
        rows.append(r)?;
    }
    out.set_item("rows", rows)?;
    Ok(out)
}

/// Finite-difference gradient checks; returns [(name, max_rel_err, pass)].
#[pyfunction]
#[pyo3(signature = (seed=0, max_coords=2))]
fn grad_check(seed: u64, max_coords: usize) -> PyResult<Vec<(String, f64, bool)>> {
    let results = checks::run_grad_checks(seed, Some(max_coords)).map_err(to_py_err)?;
    Ok(results
        .into_iter()
        .map(|r| (r.name, r.max_rel_err, r.pass))
        .collect())
}

/// The built-in 200-word content vocabulary.
#[pyfunction]
fn default_word_list() -> Vec<String> {
    synth::default_word_list()
}

#[pymodule]
fn ocrfuse_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(edit_distance, m)?)?;
    m.add_function(wrap_pyfunction!(anls, m)?)?;
    m.add_function(wrap_pyfunction!(phoc_encode, m)?)?;
    m.add_function(wrap_pyfunction!(word_embedding, m)?)?;
    m.add_function(wrap_pyfunction!(complexity, m)?)?;
    m.add_function(wrap_pyfunction!(empirical_count, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(default_word_list, m)?)?;
    Ok(())
}
