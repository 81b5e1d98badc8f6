//! Python bindings: mapping, edge tables, statement building, models and whole runs.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use streamgraph::cli::{fit_models as fit_rows, run_config, EngineConfig};
use streamgraph::committer::build_statements;
use streamgraph::edge_table::{create_edges as build_table, create_edges_parallel, EdgeTable as CoreTable};
use streamgraph::mapping::{load_mapping, tweet_mapping, MappingConfig};
use streamgraph::metrics::density;
use streamgraph::predictor::{cpu_preset, BufferModel as CoreBuffer, CpuModel as CoreCpu, ModelSet, PhiKind};
use streamgraph::stream_source::RawRecord;
use streamgraph::synth::{generate, CorpusSpec};
use streamgraph::telemetry::read_telemetry;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Serializes through JSON so Python receives plain dicts and lists.
fn to_py<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(runtime_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_lines(lines: &[String]) -> PyResult<Vec<RawRecord>> {
    lines
        .iter()
        .enumerate()
        .map(|(i, l)| RawRecord::parse(l, i as u64, i as u64).map_err(|e| value_err(format!("line {i}: {e}"))))
        .collect()
}

#[pyclass(module = "streamgraph_py", from_py_object)]
#[derive(Clone)]
struct Mapping {
    inner: MappingConfig,
}

#[pymethods]
impl Mapping {
    /// The built-in tweet mapping.
    #[staticmethod]
    fn tweets() -> Self {
        Self { inner: tweet_mapping() }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_mapping(&path).map(|inner| Self { inner }).map_err(value_err)
    }

    #[staticmethod]
    fn from_xml(text: &str) -> PyResult<Self> {
        MappingConfig::from_xml(text).map(|inner| Self { inner }).map_err(value_err)
    }
}

/// A deduplicated bucket graph.
#[pyclass(module = "streamgraph_py")]
struct EdgeTable {
    inner: CoreTable,
}

#[pymethods]
impl EdgeTable {
    #[getter]
    fn n_nodes(&self) -> usize {
        self.inner.n_nodes()
    }

    #[getter]
    fn n_edges(&self) -> usize {
        self.inner.n_edges()
    }

    /// Edges before grouping, i.e. the sum of all counts.
    #[getter]
    fn total_count(&self) -> u64 {
        self.inner.total_count()
    }

    #[getter]
    fn density(&self) -> f64 {
        density(&self.inner)
    }

    /// `(label, key)` pairs in insertion order.
    fn nodes(&self) -> Vec<(String, String)> {
        self.inner.index().iter().map(|n| (n.label.clone(), n.key.clone())).collect()
    }

    /// `(start_label, start_key, end_label, end_key, label, count)` per grouped edge.
    fn edges(&self) -> Vec<(String, String, String, String, String, u64)> {
        self.inner
            .rows()
            .iter()
            .map(|r| {
                let (s, e) = (self.inner.start_of(r), self.inner.end_of(r));
                (s.label.clone(), s.key.clone(), e.label.clone(), e.key.clone(), r.label.clone(), r.count)
            })
            .collect()
    }

    #[pyo3(signature = (bucket_index=0))]
    fn to_cypher(&self, bucket_index: u64) -> String {
        build_statements(&self.inner, bucket_index).to_cypher()
    }

    /// Statements sent over statements that would be sent without grouping.
    fn compression_ratio(&self) -> Option<f64> {
        build_statements(&self.inner, 0).compression_ratio()
    }

    fn __repr__(&self) -> String {
        format!("EdgeTable(nodes={}, edges={})", self.inner.n_nodes(), self.inner.n_edges())
    }
}

/// Builds the bucket graph for a list of JSON lines.
#[pyfunction]
#[pyo3(signature = (lines, mapping=None, workers=1))]
fn create_edges(lines: Vec<String>, mapping: Option<Mapping>, workers: usize) -> PyResult<EdgeTable> {
    let records = parse_lines(&lines)?;
    let m = mapping.map(|m| m.inner).unwrap_or_else(tweet_mapping);
    let inner = if workers > 1 { create_edges_parallel(&records, &m, workers) } else { build_table(&records, &m) };
    Ok(EdgeTable { inner })
}

fn phi(name: &str) -> PyResult<PhiKind> {
    match name {
        "linear" => Ok(PhiKind::Linear),
        "quadratic" => Ok(PhiKind::Quadratic),
        "inverse" => Ok(PhiKind::Inverse),
        other => Err(value_err(format!("unknown phi {other:?}"))),
    }
}

#[pyclass(module = "streamgraph_py", skip_from_py_object)]
#[derive(Clone, Copy)]
struct BufferModel {
    inner: CoreBuffer,
}

#[pymethods]
impl BufferModel {
    #[new]
    #[pyo3(signature = (k=0.597, r=1.48, intercept=0.0, phi1="linear", phi2="quadratic"))]
    fn new(k: f64, r: f64, intercept: f64, phi1: &str, phi2: &str) -> PyResult<Self> {
        Ok(Self { inner: CoreBuffer { k, r, intercept, phi1: phi(phi1)?, phi2: phi(phi2)? } })
    }

    fn predict(&self, rho: f64, d: f64) -> f64 {
        self.inner.predict(rho, d)
    }

    #[getter]
    fn k(&self) -> f64 {
        self.inner.k
    }

    #[getter]
    fn r(&self) -> f64 {
        self.inner.r
    }

    #[getter]
    fn intercept(&self) -> f64 {
        self.inner.intercept
    }

    fn __repr__(&self) -> String {
        format!("BufferModel(k={}, r={}, intercept={})", self.inner.k, self.inner.r, self.inner.intercept)
    }
}

#[pyclass(module = "streamgraph_py", skip_from_py_object)]
#[derive(Clone, Copy)]
struct CpuModel {
    inner: CoreCpu,
}

#[pymethods]
impl CpuModel {
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        cpu_preset(name).map(|inner| Self { inner }).map_err(value_err)
    }

    fn predict(&self, beta: f64, mu_prev: f64) -> f64 {
        self.inner.predict(beta, mu_prev)
    }

    /// Largest load whose predicted CPU stays below `target`, if any.
    fn max_load_below(&self, target: f64, mu_prev: f64) -> Option<f64> {
        self.inner.max_load_below(target, mu_prev)
    }

    #[getter]
    fn a(&self) -> f64 {
        self.inner.a
    }

    #[getter]
    fn b(&self) -> f64 {
        self.inner.b
    }

    #[getter]
    fn c(&self) -> f64 {
        self.inner.c
    }

    fn __repr__(&self) -> String {
        format!("CpuModel(a={}, b={}, c={})", self.inner.a, self.inner.b, self.inner.c)
    }
}

/// Loads a model file written by `fit_models` or the CLI.
#[pyfunction]
fn load_models(path: PathBuf) -> PyResult<(BufferModel, CpuModel)> {
    let m = ModelSet::load(&path).map_err(value_err)?;
    Ok((BufferModel { inner: m.buffer }, CpuModel { inner: m.cpu }))
}

/// Fits both models from a telemetry CSV; writes them to `out` when given.
#[pyfunction]
#[pyo3(signature = (telemetry, out=None, phi1="linear", phi2="quadratic"))]
fn fit_models(
    telemetry: PathBuf,
    out: Option<PathBuf>,
    phi1: &str,
    phi2: &str,
) -> PyResult<(BufferModel, CpuModel, String)> {
    let (rows, _) = read_telemetry(&telemetry).map_err(value_err)?;
    let fit = fit_rows(&rows, phi(phi1)?, phi(phi2)?).map_err(value_err)?;
    if let Some(path) = out {
        fit.models.save(&path).map_err(runtime_err)?;
    }
    Ok((BufferModel { inner: fit.models.buffer }, CpuModel { inner: fit.models.cpu }, fit.render()))
}

/// Lists every problem in an engine config; empty when it is valid.
#[pyfunction]
fn validate_config(path: PathBuf) -> Vec<String> {
    match EngineConfig::load(&path) {
        Ok(_) => Vec::new(),
        Err(e) => e.to_string().lines().map(str::to_string).collect(),
    }
}

/// Runs an engine config to completion and returns the run report as a dict.
#[pyfunction]
fn run(py: Python<'_>, config: PathBuf) -> PyResult<Bound<'_, PyAny>> {
    let cfg = EngineConfig::load(&config).map_err(value_err)?;
    let outcome = py.detach(|| run_config(&cfg)).map_err(runtime_err)?;
    to_py(py, &outcome.report)
}

/// Synthetic tweet JSON lines.
#[pyfunction]
#[pyo3(signature = (records=1000, seed=7, topic_shift_every=0))]
fn synth_corpus(records: usize, seed: u64, topic_shift_every: usize) -> Vec<String> {
    generate(&CorpusSpec { records, seed, topic_shift_every, ..CorpusSpec::default() })
}

#[pymodule]
fn streamgraph_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Mapping>()?;
    m.add_class::<EdgeTable>()?;
    m.add_class::<BufferModel>()?;
    m.add_class::<CpuModel>()?;
    m.add_function(wrap_pyfunction!(create_edges, m)?)?;
    m.add_function(wrap_pyfunction!(load_models, m)?)?;
    m.add_function(wrap_pyfunction!(fit_models, m)?)?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(synth_corpus, m)?)?;
    Ok(())
}
