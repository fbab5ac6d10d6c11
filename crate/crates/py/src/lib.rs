//! Python bindings for the Virtual ID pipeline.
//!
//! Records cross the boundary as JSON lines; vectors as lists of floats.

use std::collections::{BTreeMap, BTreeSet};

use pyo3::exceptions::{PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use vid_core::config::PipelineConfig;
use vid_core::embed::{generate_walks, train_skipgram, EmbeddingTable, Objective, SkipGramParams, WalkParams};
use vid_core::eval;
use vid_core::graph::{project_coclick_par, prune, CoClickGraph, Level};
use vid_core::mining::{self, SampleKind};
use vid_core::pipeline::{Pipeline, Stage};
use vid_core::pvlog::{parse_pvlog_str, write_pvlog, Features, PvRecord};
use vid_core::synth::generate_dataset;
use vid_core::train::losses;
use vid_core::train::PairForm;
use vid_core::vid::{cluster_embeddings, map_vid_to_top_category, VirtualIdAssignment};

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn level(name: &str) -> PyResult<Level> {
    name.parse().map_err(value_err)
}

/// A parsed page-view log.
#[pyclass(module = "virtual_id", frozen)]
struct PvLog {
    records: Vec<PvRecord>,
    rejected: Vec<String>,
}

#[pymethods]
impl PvLog {
    /// Parses JSON lines. With `strict` the first bad line raises.
    #[staticmethod]
    #[pyo3(signature = (text, strict = false))]
    fn parse(text: &str, strict: bool) -> PyResult<Self> {
        let o = parse_pvlog_str(text, strict).map_err(value_err)?;
        Ok(Self { records: o.records, rejected: o.rejected.iter().map(ToString::to_string).collect() })
    }

    fn __len__(&self) -> usize {
        self.records.len()
    }

    /// Messages for lines skipped during a lenient parse.
    #[getter]
    fn rejected(&self) -> Vec<String> {
        self.rejected.clone()
    }

    fn query_ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.query_id.clone()).collect()
    }

    fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        write_pvlog(&mut buf, &self.records).expect("in-memory write");
        String::from_utf8(buf).expect("json is utf-8")
    }
}

/// Generates a synthetic train log, test log and ground truth.
///
/// `overrides` maps `synth.*` keys without the prefix, e.g. `{"num_pvs": "500"}`.
#[pyfunction]
#[pyo3(signature = (seed = 42, test_pvs = 500, overrides = None))]
fn synthesize(
    seed: u64,
    test_pvs: usize,
    overrides: Option<BTreeMap<String, String>>,
) -> PyResult<(PvLog, PvLog, String)> {
    let mut cfg = PipelineConfig::default();
    for (k, v) in overrides.unwrap_or_default() {
        cfg.set(&format!("synth.{k}"), &v).map_err(value_err)?;
    }
    let ds = generate_dataset(&cfg.synth(), seed, test_pvs).map_err(|e| value_err(e.0))?;
    let mut truth = Vec::new();
    ds.truth.write_jsonl(&mut truth).expect("in-memory write");
    Ok((
        PvLog { records: ds.train, rejected: vec![] },
        PvLog { records: ds.test, rejected: vec![] },
        String::from_utf8(truth).expect("json is utf-8"),
    ))
}

/// Undirected co-click graph at item or leaf-category level.
#[pyclass(module = "virtual_id", frozen)]
struct Graph {
    inner: CoClickGraph,
}

#[pymethods]
impl Graph {
    #[staticmethod]
    #[pyo3(signature = (log, level = "item", min_edge_weight = 1, min_degree = 0))]
    fn from_log(log: &PvLog, level: &str, min_edge_weight: u64, min_degree: usize) -> PyResult<Self> {
        let g = project_coclick_par(&log.records, self::level(level)?);
        Ok(Self { inner: prune(&g, min_edge_weight, min_degree) })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        CoClickGraph::from_json(text).map(|inner| Self { inner }).map_err(value_err)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn node_count(&self) -> usize {
        self.inner.node_count()
    }

    #[getter]
    fn edge_count(&self) -> usize {
        self.inner.edge_count()
    }

    fn weight(&self, a: &str, b: &str) -> u64 {
        self.inner.weight(a, b)
    }

    fn nodes(&self) -> Vec<String> {
        self.inner.nodes().cloned().collect()
    }
}

/// Node embeddings learned from random walks.
#[pyclass(module = "virtual_id", frozen)]
struct Embeddings {
    table: EmbeddingTable,
    #[pyo3(get)]
    epoch_losses: Vec<f64>,
}

#[pymethods]
impl Embeddings {
    fn __len__(&self) -> usize {
        self.table.len()
    }

    #[getter]
    fn nodes(&self) -> Vec<String> {
        self.table.nodes.clone()
    }

    fn vector(&self, node: &str) -> PyResult<Vec<f64>> {
        let i = self.table.index_of(node).ok_or_else(|| PyKeyError::new_err(node.to_string()))?;
        Ok(self.table.vector(i).to_vec())
    }

    fn to_text(&self) -> String {
        self.table.to_text()
    }
}

/// Weighted random walks followed by skip-gram training.
#[pyfunction]
#[pyo3(signature = (
    graph, dim = 64, walks_per_node = 10, walk_length = 40, window = 5, epochs = 5,
    objective = "hs", seed = 0
))]
#[allow(clippy::too_many_arguments)]
fn deepwalk(
    graph: &Graph,
    dim: usize,
    walks_per_node: usize,
    walk_length: usize,
    window: usize,
    epochs: usize,
    objective: &str,
    seed: u64,
) -> PyResult<Embeddings> {
    let objective = match objective {
        "hs" => Objective::HierSoftmax,
        "ns" => Objective::NegSampling { negatives: 5 },
        other => return Err(value_err(format!("unknown objective {other:?}"))),
    };
    let corpus = generate_walks(&graph.inner, WalkParams { walks_per_node, walk_length, seed, uniform: false });
    let params = SkipGramParams { dim, window, epochs, objective, seed, ..SkipGramParams::default() };
    let (table, report) = train_skipgram(&corpus, &params).map_err(value_err)?;
    Ok(Embeddings { table, epoch_losses: report.epoch_losses })
}

/// Virtual ID of every embedded node.
#[pyclass(module = "virtual_id", frozen)]
struct VirtualIds {
    inner: VirtualIdAssignment,
}

#[pymethods]
impl VirtualIds {
    #[getter]
    fn k(&self) -> usize {
        self.inner.k
    }

    #[getter]
    fn inertia(&self) -> f64 {
        self.inner.inertia()
    }

    fn get(&self, node: &str) -> Option<usize> {
        self.inner.get(node)
    }

    fn as_dict(&self) -> BTreeMap<String, usize> {
        self.inner.nodes.iter().cloned().zip(self.inner.labels.iter().copied()).collect()
    }

    fn cluster_sizes(&self) -> Vec<usize> {
        self.inner.cluster_sizes()
    }

    /// Majority top category of each Virtual ID, as seen in `log`.
    fn top_categories(&self, log: &PvLog) -> BTreeMap<usize, String> {
        map_vid_to_top_category(&self.inner, &log.records).vid_to_top
    }
}

/// k-means over L2-normalized embeddings.
#[pyfunction]
#[pyo3(signature = (embeddings, k, seed = 0, max_iters = 100, level = "item"))]
fn cluster(embeddings: &Embeddings, k: usize, seed: u64, max_iters: usize, level: &str) -> PyResult<VirtualIds> {
    cluster_embeddings(&embeddings.table, k, seed, max_iters, self::level(level)?)
        .map(|inner| VirtualIds { inner })
        .map_err(value_err)
}

/// Weighted mean of per-channel Euclidean distances.
#[pyfunction]
fn fusion_distance(a: Features, b: Features, weights: Vec<f64>) -> PyResult<f64> {
    mining::fusion_distance(&a, &b, &weights).map_err(value_err)
}

#[pyfunction]
fn softmax_ce(logits: Vec<f64>, label: usize) -> PyResult<(f64, Vec<f64>)> {
    losses::softmax_ce(&logits, label).map(|v| (v.loss, v.grad)).map_err(value_err)
}

/// `form` is "hinge" (default) or "printed".
#[pyfunction]
#[pyo3(signature = (logits, y_neg, y_hard, form = "hinge"))]
fn pair_loss(logits: Vec<f64>, y_neg: usize, y_hard: usize, form: &str) -> PyResult<(f64, Vec<f64>)> {
    let form = match form {
        "hinge" => PairForm::Hinge,
        "printed" => PairForm::Printed,
        other => return Err(value_err(format!("unknown pair form {other:?}"))),
    };
    losses::pair_loss(&logits, y_neg, y_hard, form).map(|v| (v.loss, v.grad)).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (logits, label, hard, eta_simple = 1.0, eta_hard = 2.0))]
fn hard_aware_loss(
    logits: Vec<f64>,
    label: usize,
    hard: bool,
    eta_simple: f64,
    eta_hard: f64,
) -> PyResult<(f64, Vec<f64>)> {
    let kind = if hard { SampleKind::Hard } else { SampleKind::Simple };
    losses::hard_aware_loss(&logits, label, kind, eta_simple, eta_hard).map(|v| (v.loss, v.grad)).map_err(value_err)
}

type TripletGrads = (f64, Vec<f64>, Vec<f64>, Vec<f64>);

/// Returns `(loss, grad_q, grad_pos, grad_neg)`.
#[pyfunction]
fn triplet_loss(q: Vec<f64>, pos: Vec<f64>, neg: Vec<f64>) -> PyResult<TripletGrads> {
    let v = losses::triplet_loss(&q, &pos, &neg).map_err(value_err)?;
    Ok((v.loss, v.grad_q, v.grad_pos, v.grad_neg))
}

/// Weighted Plackett-Luce loss; `teacher_pi` is 0-based.
#[pyfunction]
#[pyo3(signature = (scores, teacher_pi, weights = None))]
fn listwise_loss(scores: Vec<f64>, teacher_pi: Vec<usize>, weights: Option<Vec<f64>>) -> PyResult<(f64, Vec<f64>)> {
    let w = weights.unwrap_or_else(|| mining::default_position_weights(scores.len()));
    losses::listwise_loss(&scores, &teacher_pi, &w).map(|v| (v.loss, v.grad)).map_err(value_err)
}

#[pyfunction]
fn plackett_prob(scores: Vec<f64>, pi: Vec<usize>) -> PyResult<f64> {
    losses::plackett_prob(&scores, &pi).map_err(value_err)
}

fn sets(truth: BTreeMap<String, Vec<String>>) -> eval::IdenticalSets {
    truth.into_iter().map(|(q, items)| (q, items.into_iter().collect::<BTreeSet<_>>())).collect()
}

/// Returns `(mean set recall, hit rate)`.
#[pyfunction]
fn recall_at_k(
    rankings: BTreeMap<String, Vec<String>>,
    truth: BTreeMap<String, Vec<String>>,
    k: usize,
) -> (f64, f64) {
    let r = eval::recall_at_k(&rankings, &sets(truth), k);
    (r.mean, r.hit_rate)
}

#[pyfunction]
fn map_at_k(rankings: BTreeMap<String, Vec<String>>, truth: BTreeMap<String, Vec<String>>, k: usize) -> f64 {
    eval::map_at_k(&rankings, &sets(truth), k).mean
}

#[pyfunction]
fn adjusted_rand_index(a: Vec<usize>, b: Vec<usize>) -> PyResult<f64> {
    if a.len() != b.len() {
        return Err(value_err("label vectors differ in length"));
    }
    Ok(eval::adjusted_rand_index(&a, &b))
}

/// Runs one pipeline stage (or "e2e") into `out` and returns written paths.
/// Failures raise RuntimeError carrying the JSON error line.
#[pyfunction]
#[pyo3(signature = (stage, out, config = "", strict = false, seed = None))]
fn run_stage(
    py: Python<'_>,
    stage: &str,
    out: &str,
    config: &str,
    strict: bool,
    seed: Option<u64>,
) -> PyResult<Vec<String>> {
    let stage: Stage = stage.parse().map_err(value_err)?;
    let mut cfg = PipelineConfig::parse(config).map_err(value_err)?;
    if let Some(s) = seed {
        cfg.set("run.seed", &s.to_string()).map_err(value_err)?;
    }
    let pipeline = Pipeline::new(cfg, out, strict);
    py.detach(|| pipeline.run(stage))
        .map(|files| files.into_iter().map(|p| p.display().to_string()).collect())
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Effective config with defaults filled in.
#[pyfunction]
#[pyo3(signature = (config = ""))]
fn dump_config(config: &str) -> PyResult<String> {
    PipelineConfig::parse(config).map(|c| c.dump()).map_err(value_err)
}

/// Module initializer; also usable to embed the module in a host interpreter.
#[pymodule]
pub fn virtual_id(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PvLog>()?;
    m.add_class::<Graph>()?;
    m.add_class::<Embeddings>()?;
    m.add_class::<VirtualIds>()?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(deepwalk, m)?)?;
    m.add_function(wrap_pyfunction!(cluster, m)?)?;
    m.add_function(wrap_pyfunction!(fusion_distance, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_ce, m)?)?;
    m.add_function(wrap_pyfunction!(pair_loss, m)?)?;
    m.add_function(wrap_pyfunction!(hard_aware_loss, m)?)?;
    m.add_function(wrap_pyfunction!(triplet_loss, m)?)?;
    m.add_function(wrap_pyfunction!(listwise_loss, m)?)?;
    m.add_function(wrap_pyfunction!(plackett_prob, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(map_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(adjusted_rand_index, m)?)?;
    m.add_function(wrap_pyfunction!(run_stage, m)?)?;
    m.add_function(wrap_pyfunction!(dump_config, m)?)?;
    Ok(())
}
