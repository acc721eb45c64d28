//! Python bindings: experiment config, the command pipeline, exact concept
//! search and the bilevel toy used to check MAML gradients.

use std::collections::BTreeMap;
use std::path::PathBuf;

use compmeta::autodiff::gradcheck::{check_first_order, check_second_order, op_cases};
use compmeta::cli::{self, Context};
use compmeta::eval::{MetricsReport, SplitMetrics};
use compmeta::experiment::ExperimentConfig;
use compmeta::meta::{outer_gradient, Order, QuadraticTask};
use compmeta::retriever::{self, ConceptDb, DbEntry, QueryKey, RetrievalResult};
use compmeta::world::SlotRole;
use compmeta::Error;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

type Metrics = BTreeMap<String, BTreeMap<String, f64>>;

fn split_map(m: &SplitMetrics) -> BTreeMap<String, f64> {
    BTreeMap::from([
        ("pair".to_string(), m.pair()),
        ("attr".to_string(), m.attr()),
        ("obj".to_string(), m.obj()),
        ("total".to_string(), m.total as f64),
    ])
}

fn report_map(r: &MetricsReport) -> Metrics {
    BTreeMap::from([("seen".to_string(), split_map(&r.seen)), ("novel".to_string(), split_map(&r.novel))])
}

#[pyclass(name = "ExperimentConfig", module = "compmeta")]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ExperimentConfig::load(&path).map(|inner| Self { inner }).map_err(py_err)
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        ExperimentConfig::from_toml_str(text).map(|inner| Self { inner }).map_err(py_err)
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(py_err)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(py_err)
    }

    fn config_hash(&self) -> String {
        self.inner.config_hash()
    }

    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.inner.eval.seeds.clone()
    }

    #[setter]
    fn set_seeds(&mut self, seeds: Vec<u64>) {
        self.inner.eval.seeds = seeds;
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn world_seed(&self) -> u64 {
        self.inner.world.seed
    }

    fn __repr__(&self) -> String {
        format!("ExperimentConfig(hash={}, seeds={:?})", &self.inner.config_hash()[..12], self.inner.eval.seeds)
    }
}

/// The artifact pipeline in one output directory.
#[pyclass(name = "Pipeline", module = "compmeta")]
struct PyPipeline {
    ctx: Context,
}

#[pymethods]
impl PyPipeline {
    #[new]
    #[pyo3(signature = (config, out=None, seed=None))]
    fn new(config: &PyConfig, out: Option<PathBuf>, seed: Option<u64>) -> PyResult<Self> {
        Context::new(config.inner.clone(), out, seed).map(|ctx| Self { ctx }).map_err(py_err)
    }

    #[getter]
    fn out(&self) -> PathBuf {
        self.ctx.out.clone()
    }

    /// Returns instance counts per split.
    fn gen_world(&self, py: Python<'_>) -> PyResult<BTreeMap<String, usize>> {
        let data = py.allow_threads(|| cli::cmd_gen_world(&self.ctx)).map_err(py_err)?;
        let s = &data.splits;
        Ok(BTreeMap::from([
            ("train".to_string(), s.train.len()),
            ("val".to_string(), s.val.len()),
            ("test_seen".to_string(), s.test_seen.len()),
            ("test_novel".to_string(), s.test_novel.len()),
            ("novel_pairs".to_string(), s.novel_pairs.len()),
        ]))
    }

    fn train_retriever(&self, py: Python<'_>) -> PyResult<()> {
        py.allow_threads(|| cli::cmd_train_retriever(&self.ctx)).map(|_| ()).map_err(py_err)
    }

    fn build_db(&self, py: Python<'_>) -> PyResult<()> {
        py.allow_threads(|| cli::cmd_build_db(&self.ctx)).map_err(py_err)
    }

    fn meta_train(&self, py: Python<'_>) -> PyResult<()> {
        py.allow_threads(|| cli::cmd_meta_train(&self.ctx)).map(|_| ()).map_err(py_err)
    }

    fn evaluate(&self, py: Python<'_>) -> PyResult<Metrics> {
        py.allow_threads(|| cli::cmd_evaluate(&self.ctx)).map(|r| report_map(&r)).map_err(py_err)
    }

    /// Runs the five-method comparison and returns the rendered table.
    fn ablate(&self, py: Python<'_>) -> PyResult<String> {
        py.allow_threads(|| cli::cmd_ablate(&self.ctx)).map(|o| o.table).map_err(py_err)
    }
}

fn unit(v: &[f64]) -> PyResult<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 1e-12 && n.is_finite()) {
        return Err(PyValueError::new_err("zero-norm key"));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn role(name: &str) -> PyResult<SlotRole> {
    match name {
        "attr" => Ok(SlotRole::Attr),
        "obj" => Ok(SlotRole::Obj),
        _ => Err(PyValueError::new_err(format!("role must be 'attr' or 'obj', got {name:?}"))),
    }
}

fn role_name(r: SlotRole) -> &'static str {
    match r {
        SlotRole::Attr => "attr",
        SlotRole::Obj => "obj",
    }
}

fn hits(r: RetrievalResult) -> Vec<(usize, f64)> {
    r.hits.into_iter().map(|h| (h.entry, h.score)).collect()
}

/// Element concept database with exact cosine search.
#[pyclass(name = "ConceptDb", module = "compmeta")]
struct PyConceptDb {
    inner: ConceptDb,
}

impl PyConceptDb {
    /// A pair key, or role-matched slot keys when `obj_key` is given.
    fn key(&self, key: &[f64], obj_key: Option<Vec<f64>>) -> PyResult<QueryKey> {
        match obj_key {
            None => Ok(QueryKey::Pair(unit(key)?)),
            Some(o) => Ok(QueryKey::Slots(unit(key)?, unit(&o)?)),
        }
    }
}

#[pymethods]
impl PyConceptDb {
    /// Entry `i` points at source instance `instances[i]` (defaults to `i`).
    /// Keys are normalized on the way in.
    #[new]
    #[pyo3(signature = (keys, labels, roles, instances=None))]
    fn new(keys: Vec<Vec<f64>>, labels: Vec<u32>, roles: Vec<String>, instances: Option<Vec<usize>>) -> PyResult<Self> {
        if labels.len() != keys.len() || roles.len() != keys.len() {
            return Err(PyValueError::new_err("keys, labels and roles must have equal length"));
        }
        let instances = instances.unwrap_or_else(|| (0..keys.len()).collect());
        if instances.len() != keys.len() {
            return Err(PyValueError::new_err("instances must match keys in length"));
        }
        let d = keys.first().map_or(0, Vec::len);
        let mut entries = Vec::with_capacity(keys.len());
        for (((k, label), r), instance) in keys.iter().zip(labels).zip(&roles).zip(instances) {
            entries.push(DbEntry { key: unit(k)?, instance, label, role: role(r)? });
        }
        ConceptDb::from_entries(d, entries).map(|inner| Self { inner }).map_err(py_err)
    }

    /// Reads a `db.bin` artifact; returns the database and its provenance string.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<(Self, String)> {
        retriever::load_db(&path).map(|(inner, meta)| (Self { inner }, meta)).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d()
    }

    /// `(key, instance, label, role)` of entry `i`.
    fn entry(&self, i: usize) -> PyResult<(Vec<f64>, usize, u32, &'static str)> {
        let e = self.inner.entries().get(i).ok_or_else(|| PyValueError::new_err(format!("no entry {i}")))?;
        Ok((e.key.clone(), e.instance, e.label, role_name(e.role)))
    }

    /// K best entries as `(entry, score)`, best first.
    #[pyo3(signature = (key, k, obj_key=None))]
    fn query_topk(&self, key: Vec<f64>, k: usize, obj_key: Option<Vec<f64>>) -> PyResult<Vec<(usize, f64)>> {
        let q = self.key(&key, obj_key)?;
        retriever::query_topk(&self.inner, &q, k).map(hits).map_err(py_err)
    }

    /// Greedy best-first selection with pairwise-distinct labels.
    #[pyo3(signature = (key, k, obj_key=None))]
    fn query_div_k(&self, key: Vec<f64>, k: usize, obj_key: Option<Vec<f64>>) -> PyResult<Vec<(usize, f64)>> {
        let q = self.key(&key, obj_key)?;
        retriever::query_div_k(&self.inner, &q, k).map(hits).map_err(py_err)
    }
}

/// Two-parameter quadratic support/query task.
#[pyclass(name = "QuadraticTask", module = "compmeta")]
struct PyQuadraticTask {
    inner: QuadraticTask,
}

#[pymethods]
impl PyQuadraticTask {
    #[new]
    fn new(seed: u64) -> Self {
        Self { inner: QuadraticTask::random(seed) }
    }

    /// Query loss after one inner SGD step from `theta`.
    fn bilevel_loss(&self, theta: [f64; 2], alpha: f64) -> f64 {
        self.inner.bilevel_loss(theta, alpha)
    }

    /// Closed-form outer gradient.
    fn analytic_outer_grad(&self, theta: [f64; 2], alpha: f64) -> [f64; 2] {
        self.inner.analytic_outer_grad(theta, alpha)
    }

    /// Outer gradient from the autodiff engine; `first_order` drops the
    /// Hessian term.
    #[pyo3(signature = (theta, alpha, steps=1, first_order=false))]
    fn outer_grad(&self, theta: [f64; 2], alpha: f64, steps: usize, first_order: bool) -> PyResult<Vec<f64>> {
        let order = if first_order { Order::First } else { Order::Second };
        outer_gradient(&QuadraticTask::params(theta), &self.inner, alpha, steps, order).map(|g| g.grad).map_err(py_err)
    }
}

/// Finite-difference check of every primitive op: `(name, first, second)`
/// relative errors.
#[pyfunction]
#[pyo3(signature = (seed=0, eps=1e-6))]
fn gradcheck(seed: u64, eps: f64) -> PyResult<Vec<(String, f64, f64)>> {
    op_cases(seed)
        .iter()
        .enumerate()
        .map(|(i, case)| {
            let s = seed.wrapping_add(i as u64);
            Ok((case.name.to_string(), check_first_order(case, s, eps)?, check_second_order(case, s, eps)?))
        })
        .collect::<compmeta::Result<Vec<_>>>()
        .map_err(py_err)
}

#[pymodule]
#[pyo3(name = "compmeta")]
fn compmeta_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyPipeline>()?;
    m.add_class::<PyConceptDb>()?;
    m.add_class::<PyQuadraticTask>()?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add("TOOL_VERSION", compmeta::experiment::TOOL_VERSION)?;
    Ok(())
}
