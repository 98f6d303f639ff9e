use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use paratool::flops::{flops_transformer as transformer_flops, ModelDims};
use paratool::gating::{entropy as weight_entropy, top_n as keep_top, CompositionWeights};
use paratool::model::Tokenizer;
use paratool::pipeline::config::RunConfig;
use paratool::pipeline::run::Experiment;
use paratool::synth::{generate_dataset, SynthConfig};
use paratool::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::NotOnSimplex { .. } | Error::OutOfVocabulary(_) | Error::UnboundedRadius => {
            PyValueError::new_err(e.to_string())
        }
        Error::MissingArtifact { .. } => PyFileNotFoundError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Aggregated-gradient bound for simplex weights `alpha`.
#[pyfunction]
fn gradient_bound(g: f64, rho: f64, alpha: Vec<f64>, delta: f64) -> PyResult<f64> {
    paratool::theory::gradient_bound(g, rho, &alpha, delta).map_err(to_py)
}

/// Certified radius for gradient norm `gnorm`, smoothness `beta` and budget `eps`.
#[pyfunction]
fn radius_lower_bound(gnorm: f64, beta: f64, eps: f64) -> PyResult<f64> {
    paratool::theory::radius_lower_bound(gnorm, beta, eps).map_err(to_py)
}

/// `(linear, attention)` matmul FLOPs of one forward pass.
#[pyfunction]
#[pyo3(signature = (s, hidden, layers, heads, d_ff, vocab))]
fn flops_transformer(s: u64, hidden: u64, layers: u64, heads: u64, d_ff: u64, vocab: u64) -> PyResult<(u128, u128)> {
    let dims = ModelDims { hidden, layers, heads, d_ff, vocab };
    dims.validate().map_err(to_py)?;
    Ok(transformer_flops(s, &dims))
}

#[pyfunction]
fn tokenize(text: &str) -> PyResult<Vec<usize>> {
    Tokenizer::new().tokenize(text).map(|s| s.ids).map_err(to_py)
}

#[pyfunction]
fn entropy(weights: Vec<f64>) -> f64 {
    weight_entropy(&weights)
}

/// Keeps the `n` largest weights and renormalizes; returns `(candidates, weights)`.
#[pyfunction]
fn top_n(candidates: Vec<u32>, weights: Vec<f64>, n: usize) -> PyResult<(Vec<u32>, Vec<f64>)> {
    if candidates.len() != weights.len() {
        return Err(PyValueError::new_err("candidates and weights differ in length"));
    }
    let kept = keep_top(&CompositionWeights { candidates, weights }, n);
    Ok((kept.candidates, kept.weights))
}

/// The generated corpus as a JSON string.
#[pyfunction]
#[pyo3(signature = (seed, tools = 12))]
fn synth_json(seed: u64, tools: usize) -> PyResult<String> {
    let data = generate_dataset(seed, &SynthConfig { tools, ..SynthConfig::default() }).map_err(to_py)?;
    let value = (&data.tools, &data.train, &data.validation, &data.test);
    serde_json::to_string(&value).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Default run configuration as TOML.
#[pyfunction]
#[pyo3(signature = (preset = "default"))]
fn config_toml(preset: &str) -> PyResult<String> {
    let c = match preset {
        "default" => RunConfig::default(),
        "smoke" => RunConfig::smoke(),
        other => return Err(PyValueError::new_err(format!("unknown preset `{other}`"))),
    };
    c.to_toml().map_err(to_py)
}

/// Runs every stage and returns the per-seed summary table.
#[pyfunction]
fn run_experiment(py: Python<'_>, config: &str, root: PathBuf) -> PyResult<String> {
    let config = RunConfig::from_toml(config).map_err(to_py)?;
    py.detach(|| {
        let exp = Experiment::new(config, &root)?;
        exp.run_all()?;
        std::fs::read_to_string(exp.layout.reports().join("summary.tsv")).map_err(Error::from)
    })
    .map_err(to_py)
}

#[pymodule]
#[pyo3(name = "paratool")]
fn paratool_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(gradient_bound, m)?)?;
    m.add_function(wrap_pyfunction!(radius_lower_bound, m)?)?;
    m.add_function(wrap_pyfunction!(flops_transformer, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(entropy, m)?)?;
    m.add_function(wrap_pyfunction!(top_n, m)?)?;
    m.add_function(wrap_pyfunction!(synth_json, m)?)?;
    m.add_function(wrap_pyfunction!(config_toml, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
