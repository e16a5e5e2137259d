//! Python bindings. Configs and decode modes cross the boundary as JSON
//! strings in the same shape the CLI reads.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use topk_lab::attention::{attend_full, attend_selected, DecodeMode, HeadKv, WindowPolicy};
use topk_lab::harness::{self, ExperimentConfig};
use topk_lab::model::{self, Checkpoint, ModelConfig};
use topk_lab::numerics;
use topk_lab::selection::{self, Provenance, Selection};
use topk_lab::tasks::{TaskKind, TaskSpec};
use topk_lab::LabError;

fn to_py(e: LabError) -> PyErr {
    match e {
        LabError::Io { .. } => PyIOError::new_err(e.to_string()),
        LabError::Training { .. } | LabError::Scoring(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_mode(mode: Option<&str>) -> Result<DecodeMode, LabError> {
    match mode {
        None => Ok(DecodeMode::Full),
        Some(text) => Ok(serde_json::from_str(text)?),
    }
}

fn selection(indices: Vec<usize>, context_len: usize) -> Result<Selection, LabError> {
    Selection::from_indices(indices, context_len, Provenance::Exact)
}

fn flatten(rows: &[Vec<f64>]) -> Result<(Vec<f64>, usize), LabError> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(LabError::Domain("ragged key/value rows".into()));
    }
    Ok((rows.concat(), d))
}

/// Indices of the `window` largest scores, sorted ascending.
#[pyfunction]
fn exact_topk(scores: Vec<f64>, window: usize) -> PyResult<Vec<usize>> {
    let sel = selection::exact_topk(&scores, window).map_err(to_py)?;
    Ok(sel.indices().to_vec())
}

/// A window that keeps `round(precision * window)` exact indices and fills
/// the rest at random.
#[pyfunction]
#[pyo3(signature = (scores, window, precision, seed = 0))]
fn precision_select(scores: Vec<f64>, window: usize, precision: f64, seed: u64) -> PyResult<Vec<usize>> {
    let exact = selection::exact_topk(&scores, window).map_err(to_py)?;
    let sel = selection::precision_controlled_select(&exact, precision, scores.len(), seed).map_err(to_py)?;
    Ok(sel.indices().to_vec())
}

#[pyfunction]
fn retrieval_precision(approx: Vec<usize>, exact: Vec<usize>, context_len: usize) -> PyResult<f64> {
    let a = selection(approx, context_len).map_err(to_py)?;
    let e = selection(exact, context_len).map_err(to_py)?;
    selection::retrieval_precision(&a, &e).map_err(to_py)
}

/// Window size for a Top-k ratio over `context_len` keys.
#[pyfunction]
fn topk_window(ratio: f64, context_len: usize) -> PyResult<usize> {
    let w = WindowPolicy::Ratio(ratio);
    w.validate().map_err(to_py)?;
    Ok(w.window(context_len))
}

#[pyfunction]
fn softmax(logits: Vec<f64>) -> PyResult<Vec<f64>> {
    numerics::softmax_stable(&logits).map_err(to_py)
}

#[pyfunction]
fn entropy(p: Vec<f64>) -> PyResult<f64> {
    numerics::shannon_entropy(&p).map_err(to_py)
}

/// Single-head attention; `indices` restricts it to a subset of keys.
#[pyfunction]
#[pyo3(signature = (query, keys, values, indices = None))]
fn attend(
    query: Vec<f64>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    indices: Option<Vec<usize>>,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let run = || -> Result<_, LabError> {
        let (k, d) = flatten(&keys)?;
        let (v, dv) = flatten(&values)?;
        if dv != d || values.len() != keys.len() {
            return Err(LabError::Domain("keys and values differ in shape".into()));
        }
        let kv = HeadKv::new(&k, &v, d)?;
        let scale = 1.0 / (d as f64).sqrt();
        match indices {
            None => attend_full(&query, kv, scale),
            Some(idx) => attend_selected(&query, kv, &selection(idx, keys.len())?, scale),
        }
    };
    run().map_err(to_py)
}

#[pyfunction]
fn spearman(x: Vec<f64>, y: Vec<f64>) -> Option<f64> {
    harness::spearman(&x, &y)
}

/// One synthetic instance as a dict with `prompt`, `answer` and `needle_span`.
#[pyfunction]
#[pyo3(signature = (task, context_len, vocab, seed, pairs = 4))]
fn gen_task<'py>(
    py: Python<'py>,
    task: &str,
    context_len: usize,
    vocab: usize,
    seed: u64,
    pairs: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let kind: TaskKind = task.parse().map_err(to_py)?;
    let spec = TaskSpec {
        task: kind,
        count: 1,
        context_len,
        seed,
        pairs,
    };
    let inst = spec.generate_one(vocab, seed).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("task", inst.task.to_string())?;
    d.set_item("prompt", inst.prompt)?;
    d.set_item("answer", inst.answer)?;
    d.set_item("needle_span", inst.needle_span)?;
    Ok(d)
}

/// Runs a CLI command (`train`, `sweep-ratio`, …) from a config file.
#[pyfunction]
#[pyo3(signature = (command, config, out = None, seed = None))]
fn run(command: &str, config: PathBuf, out: Option<PathBuf>, seed: Option<u64>) -> PyResult<Vec<String>> {
    let cmd = match command {
        "train" => harness::Command::Train,
        "sweep-ratio" => harness::Command::SweepRatio,
        "sweep-precision" => harness::Command::SweepPrecision,
        "indexer-stats" => harness::Command::IndexerStats,
        "entropy-compare" => harness::Command::EntropyCompare,
        "gen-tasks" => harness::Command::GenTasks,
        other => return Err(PyValueError::new_err(format!("unknown command '{other}'"))),
    };
    let mut cfg = ExperimentConfig::load(&config).map_err(to_py)?;
    if let Some(s) = seed {
        cfg.seed = s;
        if let Some(t) = cfg.train.as_mut() {
            t.seeds = vec![s];
        }
    }
    let out = out.unwrap_or_else(|| cfg.output_dir());
    let files = harness::run_command(cmd, &cfg, &out).map_err(to_py)?;
    Ok(files.iter().map(|p| p.display().to_string()).collect())
}

/// A decoder checkpoint.
#[pyclass(module = "topk_lab_py")]
struct Model {
    inner: Checkpoint,
}

#[pymethods]
impl Model {
    /// Fresh random weights from a JSON model config.
    #[staticmethod]
    fn init(config: &str, seed: u64) -> PyResult<Self> {
        let cfg: ModelConfig = serde_json::from_str(config).map_err(|e| to_py(e.into()))?;
        Ok(Self {
            inner: Checkpoint::init(cfg, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::load(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<String> {
        Ok(self.inner.save(path).map_err(to_py)?.display().to_string())
    }

    #[getter]
    fn config(&self) -> String {
        serde_json::to_string(&self.inner.config).expect("config serializes")
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    /// Greedy decoding; `mode` is a JSON decode mode such as
    /// `{"kind": "top_k", "window": {"ratio": 0.25}}`.
    #[pyo3(signature = (prompt, steps, mode = None, seed = 0))]
    fn generate(&self, prompt: Vec<u32>, steps: usize, mode: Option<&str>, seed: u64) -> PyResult<Vec<u32>> {
        let mode = parse_mode(mode).map_err(to_py)?;
        let out = model::generate(&self.inner, &prompt, steps, mode, false, seed).map_err(to_py)?;
        Ok(out.tokens)
    }

    /// Next-token logits at every position of `tokens`.
    fn logits(&self, tokens: Vec<u32>) -> PyResult<Vec<Vec<f64>>> {
        model::sequence_logits(&self.inner, &tokens).map_err(to_py)
    }

    /// Accuracy on `count` generated instances of a task.
    #[pyo3(signature = (task, count, context_len, seed, mode = None))]
    fn evaluate(&self, task: &str, count: usize, context_len: usize, seed: u64, mode: Option<&str>) -> PyResult<f64> {
        let spec = TaskSpec {
            task: task.parse().map_err(to_py)?,
            count,
            context_len,
            seed,
            pairs: 4,
        };
        let instances = spec.generate(self.inner.config.vocab).map_err(to_py)?;
        let scores = harness::evaluate(&self.inner, &instances, parse_mode(mode).map_err(to_py)?, seed).map_err(to_py)?;
        Ok(scores.iter().map(|&s| s as f64).sum::<f64>() / scores.len().max(1) as f64)
    }
}

#[pymodule]
fn topk_lab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(exact_topk, m)?)?;
    m.add_function(wrap_pyfunction!(precision_select, m)?)?;
    m.add_function(wrap_pyfunction!(retrieval_precision, m)?)?;
    m.add_function(wrap_pyfunction!(topk_window, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(entropy, m)?)?;
    m.add_function(wrap_pyfunction!(attend, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(gen_task, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ragged_rows_are_rejected() {
        assert!(flatten(&[vec![1.0, 2.0], vec![3.0]]).is_err());
        let (flat, d) = flatten(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!((flat.len(), d), (4, 2));
    }

    #[test]
    fn modes_parse_from_json() {
        assert_eq!(parse_mode(None).unwrap(), DecodeMode::Full);
        let m = parse_mode(Some(r#"{"kind":"top_k","window":{"ratio":0.5}}"#)).unwrap();
        assert_eq!(m, DecodeMode::topk_ratio(0.5));
        assert!(parse_mode(Some(r#"{"kind":"sideways"}"#)).is_err());
    }
}
