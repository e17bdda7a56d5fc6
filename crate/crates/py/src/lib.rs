//! Python bindings: run configuration, corpus generation, the three
//! training phases, inference and validation, plus the numeric, loss and
//! algebra building blocks.
//!
//! Matrices cross the boundary as lists of rows. Structured results
//! (intention sets, reports) are returned as plain Python objects.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use wintent::algebra::{self, AlgebraConfig, GenerativeFamily};
use wintent::attention::{self, AttentionParams};
use wintent::config::RunConfig;
use wintent::corpus::Corpus;
use wintent::error::Error;
use wintent::intention::Intention;
use wintent::losses;
use wintent::numerics::{self, Axis, Matrix};
use wintent::signals::{Role, SignalTriple, Stage};
use wintent::training::{self, Checkpoint, Phase, TrainPlan};

fn err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Shape { .. } | Error::Empty(_) | Error::Data(_) => PyValueError::new_err(e.to_string()),
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| err(e.into()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(err)
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn axis(name: &str) -> PyResult<Axis> {
    match name {
        "rows" => Ok(Axis::Rows),
        "cols" => Ok(Axis::Cols),
        other => Err(PyValueError::new_err(format!("axis must be 'rows' or 'cols', got {other:?}"))),
    }
}

fn phase(name: &str) -> PyResult<Phase> {
    name.parse().map_err(err)
}

#[pyclass(name = "RunConfig", module = "wintent", skip_from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// Defaults, or a JSON document with any subset of the fields.
    #[new]
    #[pyo3(signature = (json = None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let inner = match json {
            Some(text) => RunConfig::from_json(text).map_err(err)?,
            None => RunConfig::default(),
        };
        Ok(PyRunConfig { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (path, seed = None))]
    fn load(path: PathBuf, seed: Option<u64>) -> PyResult<Self> {
        Ok(PyRunConfig { inner: wintent::cli::load_config(Some(&path), seed).map_err(err)? })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(|e| err(e.into()))
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(seed={}, d={}, samples={})", self.inner.seed, self.inner.model.d, self.inner.corpus.samples)
    }
}

#[pyclass(name = "Corpus", module = "wintent")]
struct PyCorpus {
    inner: Corpus,
}

#[pymethods]
impl PyCorpus {
    #[staticmethod]
    fn generate(config: &PyRunConfig) -> PyResult<Self> {
        let c = &config.inner;
        let echo = serde_json::to_value(c).map_err(|e| err(e.into()))?;
        Ok(PyCorpus { inner: wintent::corpus::generate(&c.corpus, &c.model, echo).map_err(err)? })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(PyCorpus { inner: Corpus::load(&dir).map_err(err)? })
    }

    fn write(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.write(&dir).map_err(err)
    }

    fn digest(&self) -> PyResult<String> {
        self.inner.digest().map_err(err)
    }

    #[getter]
    fn sample_ids(&self) -> Vec<String> {
        self.inner.samples.iter().map(|s| s.id.clone()).collect()
    }

    #[getter]
    fn n_artefacts(&self) -> usize {
        self.inner.artefacts.len()
    }

    fn __len__(&self) -> usize {
        self.inner.samples.len()
    }
}

#[pyclass(name = "Checkpoint", module = "wintent")]
struct PyCheckpoint {
    inner: Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    /// Fresh parameters for `config`.
    #[staticmethod]
    fn init(config: &PyRunConfig) -> PyResult<Self> {
        Ok(PyCheckpoint { inner: Checkpoint::init(&config.inner).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyCheckpoint { inner: Checkpoint::load(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    /// Completed phases in order, as "1.1", "1.2", "2".
    #[getter]
    fn phases(&self) -> Vec<String> {
        self.inner.history.iter().map(|r| r.plan.phase.to_string()).collect()
    }

    #[getter]
    fn group_hashes(&self) -> std::collections::BTreeMap<String, String> {
        self.inner.model.params.group_hashes()
    }

    #[getter]
    fn n_parameters(&self) -> usize {
        self.inner.model.params.scalar_count()
    }

    #[getter]
    fn config(&self) -> PyRunConfig {
        PyRunConfig { inner: self.inner.config.clone() }
    }

    /// Per-epoch metrics of the last phase.
    fn metrics<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let epochs = self.inner.history.last().map(|r| r.epochs.clone()).unwrap_or_default();
        to_py(py, &epochs)
    }

    /// Runs one phase on `corpus`. `epochs` overrides the configured count.
    #[pyo3(signature = (phase_name, corpus, epochs = None))]
    fn train(&self, py: Python<'_>, phase_name: &str, corpus: &PyCorpus, epochs: Option<usize>) -> PyResult<Self> {
        let mut plan = TrainPlan::for_phase(phase(phase_name)?, &self.inner.config);
        plan.corpus = Some(format!("sha256:{}", corpus.inner.digest().map_err(err)?));
        if let Some(n) = epochs {
            plan.epochs = n;
        }
        let start = &self.inner;
        let data = &corpus.inner;
        let out = py.detach(|| training::train(start, data, &plan)).map_err(err)?;
        Ok(PyCheckpoint { inner: out })
    }

    /// Generates the intention set for one corpus sample.
    #[pyo3(signature = (corpus, sample_id, t_max = None, tau_sim = None))]
    fn generate<'py>(
        &self,
        py: Python<'py>,
        corpus: &PyCorpus,
        sample_id: &str,
        t_max: Option<usize>,
        tau_sim: Option<f64>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let sample = corpus
            .inner
            .samples
            .iter()
            .find(|s| s.id == sample_id)
            .ok_or_else(|| PyValueError::new_err(format!("no sample {sample_id:?}")))?;
        let mut stopping = self.inner.config.stopping.clone();
        if let Some(t) = t_max {
            stopping.t_max = t;
        }
        if let Some(s) = tau_sim {
            stopping.tau_sim = s;
        }
        let model = &self.inner.model;
        let arts = sample
            .artefacts
            .iter()
            .map(|id| Ok(&corpus.inner.artefact(id)?.artefact))
            .collect::<wintent::error::Result<Vec<_>>>()
            .map_err(err)?;
        let mut spatial = model.spatial_embedder();
        let contexts = model.intra_contexts(&arts, &mut spatial).map_err(err)?;
        let trace = model.generate(&contexts, &stopping).map_err(err)?;
        to_py(py, &trace.set)
    }
}

/// `wintent gen-corpus`.
#[pyfunction]
fn gen_corpus(config: &PyRunConfig, out: PathBuf) -> PyResult<PyCorpus> {
    Ok(PyCorpus { inner: wintent::cli::cmd_gen_corpus(&config.inner, &out).map_err(err)? })
}

/// `wintent train`; writes the checkpoint and metrics under `out`.
#[pyfunction]
#[pyo3(signature = (phase_name, corpus_dir, out, config = None, checkpoint = None))]
fn train_phase(
    py: Python<'_>,
    phase_name: &str,
    corpus_dir: PathBuf,
    out: PathBuf,
    config: Option<&PyRunConfig>,
    checkpoint: Option<PathBuf>,
) -> PyResult<PyCheckpoint> {
    let p = phase(phase_name)?;
    let cfg = config.map(|c| c.inner.clone());
    let ck = py
        .detach(|| wintent::cli::cmd_train(p, cfg.as_ref(), &corpus_dir, checkpoint.as_deref(), &out))
        .map_err(err)?;
    Ok(PyCheckpoint { inner: ck })
}

/// `wintent infer`; returns the per-sample records.
#[pyfunction]
#[pyo3(signature = (checkpoint, corpus_dir, out, config = None))]
fn infer<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    corpus_dir: PathBuf,
    out: PathBuf,
    config: Option<&PyRunConfig>,
) -> PyResult<Bound<'py, PyAny>> {
    let records = wintent::cli::cmd_infer(config.map(|c| &c.inner), &checkpoint, &corpus_dir, &out).map_err(err)?;
    to_py(py, &records)
}

/// `wintent validate`; returns the report.
#[pyfunction]
fn validate<'py>(py: Python<'py>, checkpoint: PathBuf, corpus_dir: PathBuf, out: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let report = wintent::cli::cmd_validate(&checkpoint, &corpus_dir, &out).map_err(err)?;
    to_py(py, &report)
}

/// The large-scale parameter table.
#[pyfunction]
fn param_count(py: Python<'_>) -> PyResult<Bound<'_, PyAny>> {
    to_py(py, &wintent::cli::cmd_param_count(None).map_err(err)?)
}

#[pyfunction]
#[pyo3(signature = (x, axis_name = "cols"))]
fn softmax(x: Vec<Vec<f64>>, axis_name: &str) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&numerics::softmax(&matrix(x)?, axis(axis_name)?).map_err(err)?))
}

#[pyfunction]
#[pyo3(signature = (x, gamma = 1.0, beta = 0.0, epsilon = 1e-5))]
fn layer_norm(x: Vec<f64>, gamma: f64, beta: f64, epsilon: f64) -> PyResult<Vec<f64>> {
    numerics::layer_norm(&x, gamma, beta, epsilon).map_err(err)
}

/// Single-head attention over columns of `x` (`d × n`); `context` gives
/// keys and values for cross-attention.
#[pyfunction]
#[pyo3(signature = (x, wq, wk, wv, context = None, masked = false))]
fn attend(
    x: Vec<Vec<f64>>,
    wq: Vec<Vec<f64>>,
    wk: Vec<Vec<f64>>,
    wv: Vec<Vec<f64>>,
    context: Option<Vec<Vec<f64>>>,
    masked: bool,
) -> PyResult<Vec<Vec<f64>>> {
    let p = AttentionParams::new(matrix(wq)?, matrix(wk)?, matrix(wv)?).map_err(err)?;
    let x = matrix(x)?;
    let out = match (context, masked) {
        (Some(_), true) => return Err(PyValueError::new_err("cross-attention is never masked")),
        (Some(y), false) => attention::cross_attention(&x, &matrix(y)?, &p),
        (None, true) => attention::masked_self_attention(&x, &p),
        (None, false) => attention::self_attention(&x, &p),
    };
    Ok(rows(&out.map_err(err)?))
}

#[pyfunction]
#[pyo3(signature = (inner, lam = 1.0, mu = 0.5))]
fn bound(inner: f64, lam: f64, mu: f64) -> f64 {
    losses::bound(inner, lam, mu)
}

#[pyfunction]
fn sequence_loss(coverage: f64, truth_len: usize, pred_len: usize) -> PyResult<f64> {
    losses::sequence_loss(coverage, truth_len, pred_len, &losses::LossWeights::default()).map_err(err)
}

type Triple = (Vec<f64>, Vec<f64>, Vec<f64>);

fn triple(t: Triple) -> PyResult<SignalTriple> {
    SignalTriple::new(t.0, t.1, t.2, Stage::Intention).map_err(err)
}

/// Mean pairwise `exp(−‖Δ‖²)` over `(i, p, o)` triples.
#[pyfunction]
fn contrastive_loss(triples: Vec<Triple>) -> PyResult<f64> {
    let ts = triples.into_iter().map(triple).collect::<PyResult<Vec<_>>>()?;
    Ok(losses::contrastive_loss(&ts))
}

#[pyfunction]
fn head_loss(accept_probs: Vec<f64>, truth_len: usize, pred_len: usize) -> f64 {
    losses::head_loss(&accept_probs, truth_len, pred_len)
}

fn family(vectors: Vec<Vec<f64>>) -> PyResult<GenerativeFamily> {
    GenerativeFamily::new(Role::Input, vectors, &AlgebraConfig::default()).map_err(err)
}

/// Returns `(coefficients, residual_norm)`.
#[pyfunction]
fn least_squares(x: Vec<f64>, vectors: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, f64)> {
    let d = algebra::least_squares(&x, &family(vectors)?).map_err(err)?;
    Ok((d.coefficients, d.residual_norm))
}

/// Adaptive decomposition; returns `(coefficients, residual_norm,
/// iterations, grown family)`.
#[pyfunction]
#[pyo3(signature = (x, vectors, epsilon_x = 1e-6, max_iterations = 16))]
fn decompose(
    x: Vec<f64>,
    vectors: Vec<Vec<f64>>,
    epsilon_x: f64,
    max_iterations: usize,
) -> PyResult<(Vec<f64>, f64, usize, Vec<Vec<f64>>)> {
    let mut fam = family(vectors)?;
    fam.epsilon_x = epsilon_x;
    fam.max_iterations = max_iterations;
    let out = algebra::decompose_with_error(&x, &fam).map_err(err)?;
    let grown = out.family.vectors().map(<[f64]>::to_vec).collect();
    Ok((out.decomposition.coefficients, out.decomposition.residual_norm, out.iterations, grown))
}

/// Orthonormal survivors of Gram–Schmidt control.
#[pyfunction]
#[pyo3(signature = (vectors, epsilon_orth = 1e-8))]
fn gram_schmidt(vectors: Vec<Vec<f64>>, epsilon_orth: f64) -> PyResult<Vec<Vec<f64>>> {
    let mut fam = family(vectors)?;
    fam.epsilon_orth = epsilon_orth;
    Ok(algebra::gram_schmidt_control(&fam).vectors().map(<[f64]>::to_vec).collect())
}

/// Component-wise sum of two intentions given as `(i, p, o)`.
#[pyfunction]
fn intention_add(a: Triple, b: Triple) -> PyResult<Triple> {
    let wrap = |t: Triple| Intention { step: 1, i: t.0, p: t.1, o: t.2 };
    let s = algebra::intention_add(&wrap(a), &wrap(b)).map_err(err)?;
    Ok((s.i, s.p, s.o))
}

#[pymodule]
#[pyo3(name = "wintent")]
fn wintent_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyCheckpoint>()?;
    for f in [
        wrap_pyfunction!(gen_corpus, m)?,
        wrap_pyfunction!(train_phase, m)?,
        wrap_pyfunction!(infer, m)?,
        wrap_pyfunction!(validate, m)?,
        wrap_pyfunction!(param_count, m)?,
        wrap_pyfunction!(softmax, m)?,
        wrap_pyfunction!(layer_norm, m)?,
        wrap_pyfunction!(attend, m)?,
        wrap_pyfunction!(bound, m)?,
        wrap_pyfunction!(sequence_loss, m)?,
        wrap_pyfunction!(contrastive_loss, m)?,
        wrap_pyfunction!(head_loss, m)?,
        wrap_pyfunction!(least_squares, m)?,
        wrap_pyfunction!(decompose, m)?,
        wrap_pyfunction!(gram_schmidt, m)?,
        wrap_pyfunction!(intention_add, m)?,
    ] {
        m.add_function(f)?;
    }
    Ok(())
}
