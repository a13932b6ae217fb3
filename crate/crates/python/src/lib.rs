//! Python bindings. Samples cross the boundary as JSONL lines so the Python
//! side needs nothing beyond `json`.
use std::collections::HashMap;

use dygenc::embed::{TextEmbedder, DEFAULT_DIM};
use dygenc::io::{sample_from_line, sample_to_line};
use dygenc::pcst::{retrieve_frames, PcstConfig};
use dygenc::synth::{self, WorldSpec};
use dygenc::trainer::{self, TrainConfig};
use dygenc::graph::QaSample;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn err(e: dygenc::Error) -> PyErr {
    match e {
        dygenc::Error::Numerics(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse(lines: &[String]) -> PyResult<Vec<QaSample>> {
    lines
        .iter()
        .enumerate()
        .map(|(i, l)| sample_from_line(l, i + 1).map_err(err))
        .collect()
}

/// Generate a synthetic corpus; returns one JSONL line per sample.
#[pyfunction]
#[pyo3(signature = (episodes, seed=0))]
fn generate_corpus(episodes: usize, seed: u64) -> PyResult<Vec<String>> {
    let corpus = synth::generate_corpus(&WorldSpec::default(), episodes, seed).map_err(err)?;
    Ok(corpus.iter().map(sample_to_line).collect())
}

/// Answer a question from the symbolic events of a sample's graph sequence.
#[pyfunction]
fn oracle_answer(line: String) -> PyResult<Option<String>> {
    let s = sample_from_line(&line, 1).map_err(err)?;
    Ok(synth::answer_question(&s.dg, &s.question))
}

/// Keep the `budget` frames most relevant to `query` (default: the sample's question).
#[pyfunction]
#[pyo3(signature = (line, budget, query=None))]
fn retrieve(line: String, budget: usize, query: Option<String>) -> PyResult<String> {
    let mut s = sample_from_line(&line, 1).map_err(err)?;
    let q = query.unwrap_or_else(|| s.question.clone());
    let emb = TextEmbedder::hashed(DEFAULT_DIM, 0);
    s.dg = retrieve_frames(&s.dg, &q, budget, &emb, &PcstConfig::default()).map_err(err)?;
    Ok(sample_to_line(&s))
}

/// Train from a TOML config, save the checkpoint to `out_dir`, return the best val accuracy.
#[pyfunction]
fn train(py: Python<'_>, config_toml: String, lines: Vec<String>, out_dir: String) -> PyResult<f64> {
    let cfg = TrainConfig::from_toml(&config_toml).map_err(err)?;
    let corpus = parse(&lines)?;
    py.allow_threads(|| {
        let (model, report) = trainer::train(&cfg, &corpus)?;
        trainer::save_checkpoint(&model, &cfg, &out_dir)?;
        Ok(report.best_val_accuracy as f64)
    })
    .map_err(err)
}

/// Accuracy per template (plus "all") of a checkpoint on the given samples.
#[pyfunction]
fn evaluate(py: Python<'_>, ckpt: String, lines: Vec<String>) -> PyResult<HashMap<String, f64>> {
    let samples = parse(&lines)?;
    py.allow_threads(|| {
        let (mut model, _) = trainer::load_checkpoint(&ckpt)?;
        let rep = trainer::evaluate(&mut model, &samples)?;
        let mut out: HashMap<String, f64> = rep
            .per_template
            .iter()
            .map(|t| (t.template_id.clone(), t.accuracy() as f64))
            .collect();
        out.insert("all".into(), rep.overall as f64);
        Ok(out)
    })
    .map_err(err)
}

#[pymodule]
fn dygenc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_answer, m)?)?;
    m.add_function(wrap_pyfunction!(retrieve, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
