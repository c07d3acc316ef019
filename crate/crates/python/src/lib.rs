//! Python bindings: report evaluation and analysis, the statistics
//! primitives, and the prompt pipeline.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use personaeval::analysis::{self, CorrelationTable, Study};
use personaeval::backends::BackendsConfig;
use personaeval::config::{parse_metric_list, EvalConfig};
use personaeval::data::load_manifest;
use personaeval::eval::{self, EvalError};
use personaeval::identity;
use personaeval::penalty::{self, PenaltyMode};
use personaeval::prompts::{self, FpsStart, ProximityFilter, TemplateGrammar};
use personaeval::report::{Format, MetricReport};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_mode(mode: &str) -> PyResult<PenaltyMode> {
    match mode {
        "additive" => Ok(PenaltyMode::Additive),
        "literal-multiplicative" => Ok(PenaltyMode::LiteralMultiplicative),
        other => Err(PyValueError::new_err(format!(
            "mode must be \"additive\" or \"literal-multiplicative\", got {other:?}"
        ))),
    }
}

fn parse_study(study: &str) -> PyResult<Study> {
    Study::ALL
        .into_iter()
        .find(|s| s.key() == study)
        .ok_or_else(|| PyValueError::new_err(format!("unknown study {study:?}")))
}

/// Evaluation report with per-sample values and per-method aggregates.
#[pyclass(name = "MetricReport", module = "personaeval")]
struct PyMetricReport {
    inner: MetricReport,
}

#[pymethods]
impl PyMetricReport {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyMetricReport {
            inner: MetricReport::from_json(text).map_err(value_err)?,
        })
    }

    #[getter]
    fn methods(&self) -> Vec<String> {
        self.inner.methods.clone()
    }

    #[getter]
    fn metrics(&self) -> Vec<String> {
        self.inner.metrics.clone()
    }

    #[getter]
    fn manifest_hash(&self) -> String {
        self.inner.manifest_hash.clone()
    }

    /// Aggregate value, or None when undefined.
    fn aggregate(&self, method: &str, metric: &str) -> Option<f64> {
        self.inner.aggregate(method, metric)
    }

    /// method -> metric -> aggregate value.
    fn aggregates(&self) -> BTreeMap<String, BTreeMap<String, Option<f64>>> {
        self.inner
            .aggregates
            .iter()
            .map(|(m, row)| (m.clone(), row.iter().map(|(k, a)| (k.clone(), a.value)).collect()))
            .collect()
    }

    fn to_json(&self) -> String {
        self.inner.canonical_json()
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv()
    }

    fn to_markdown(&self) -> String {
        self.inner.render(Format::Markdown)
    }

    fn __repr__(&self) -> String {
        format!(
            "MetricReport(methods={:?}, metrics={:?}, samples={})",
            self.inner.methods,
            self.inner.metrics,
            self.inner.samples.len()
        )
    }
}

/// Kendall tau-b of each metric against human votes, per study.
#[pyclass(name = "CorrelationTable", module = "personaeval")]
struct PyCorrelationTable {
    inner: CorrelationTable,
}

#[pymethods]
impl PyCorrelationTable {
    fn get(&self, metric: &str, study: &str) -> PyResult<Option<f64>> {
        Ok(self.inner.get(metric, parse_study(study)?))
    }

    #[getter]
    fn votes_total(&self) -> usize {
        self.inner.votes_total
    }

    #[getter]
    fn votes_kept(&self) -> usize {
        self.inner.votes_kept
    }

    fn to_json(&self) -> String {
        self.inner.canonical_json()
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv()
    }

    fn to_markdown(&self) -> String {
        self.inner.to_markdown()
    }
}

/// Scores a manifest with the backends described in `backends`.
#[pyfunction]
#[pyo3(signature = (manifest, backends, config=None, metrics=None, workers=1))]
fn run_eval(
    py: Python<'_>,
    manifest: PathBuf,
    backends: PathBuf,
    config: Option<PathBuf>,
    metrics: Option<&str>,
    workers: usize,
) -> PyResult<PyMetricReport> {
    let manifest = load_manifest(&manifest).map_err(value_err)?;
    let mut config = match config {
        Some(p) => EvalConfig::load(p).map_err(value_err)?,
        None => EvalConfig::default(),
    };
    if let Some(list) = metrics {
        config.metrics = parse_metric_list(list).map_err(value_err)?;
    }
    let suite = BackendsConfig::load_suite(&backends).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let report = py
        .detach(|| eval::run_eval(&manifest, &config, &suite, workers))
        .map_err(|e: EvalError| {
            if e.is_backend() {
                PyRuntimeError::new_err(e.to_string())
            } else {
                value_err(e)
            }
        })?;
    Ok(PyMetricReport { inner: report })
}

/// Correlates a report with line-delimited vote records.
#[pyfunction]
fn correlate(report: &PyMetricReport, votes_jsonl: &str) -> PyResult<PyCorrelationTable> {
    let votes = analysis::parse_votes(votes_jsonl).map_err(value_err)?;
    Ok(PyCorrelationTable {
        inner: analysis::correlate(&report.inner, &votes).map_err(value_err)?,
    })
}

/// Returns `([(trial_id, winner), ...], discarded)`.
#[pyfunction]
fn majority_filter(votes_jsonl: &str) -> PyResult<(Vec<(String, String)>, usize)> {
    let votes = analysis::parse_votes(votes_jsonl).map_err(value_err)?;
    let outcome = analysis::majority_filter(&votes);
    let kept = outcome.kept.into_iter().map(|(r, w)| (r.trial_id, w)).collect();
    Ok((kept, outcome.discarded))
}

#[pyfunction]
fn kendall_tau(x: Vec<f64>, y: Vec<f64>) -> PyResult<Option<f64>> {
    analysis::kendall_tau(&x, &y).map_err(value_err)
}

#[pyfunction]
fn pearson(x: Vec<f64>, y: Vec<f64>) -> PyResult<Option<f64>> {
    analysis::pearson(&x, &y).map_err(value_err)
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    identity::roc_auc(&scores, &labels).map_err(value_err)
}

/// 1 when the output clears the copy-penalty margin, 0 otherwise.
#[pyfunction]
#[pyo3(signature = (score_pi, score_po, sigma, mode="additive"))]
fn penalty_indicator(score_pi: f64, score_po: f64, sigma: f64, mode: &str) -> PyResult<u8> {
    Ok(penalty::penalty_indicator(score_pi, score_po, parse_mode(mode)?, sigma))
}

/// Greedy maximin subset under cosine distance. Rows are length-normalized
/// first. `seed` draws the first point; otherwise it is the row nearest the
/// centroid.
#[pyfunction]
#[pyo3(signature = (candidates, k, seed=None, reference=None, max_distance=None, workers=1))]
fn farthest_point_sample(
    py: Python<'_>,
    candidates: Vec<Vec<f64>>,
    k: usize,
    seed: Option<u64>,
    reference: Option<Vec<Vec<f64>>>,
    max_distance: Option<f64>,
    workers: usize,
) -> PyResult<Vec<usize>> {
    let matrix = prompts::embedding_matrix(&candidates).map_err(value_err)?;
    let reference = reference
        .map(|r| prompts::embedding_matrix(&r))
        .transpose()
        .map_err(value_err)?;
    let filter = match (&reference, max_distance) {
        (Some(r), Some(d)) => Some(ProximityFilter {
            reference: r.view(),
            max_distance: d,
        }),
        (None, None) => None,
        _ => return Err(PyValueError::new_err("reference and max_distance go together")),
    };
    let start = seed.map_or(FpsStart::Centroid, FpsStart::Seeded);
    py.detach(|| prompts::farthest_point_sample(matrix.view(), k, start, filter.as_ref(), workers))
        .map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (subject_ids, prompt_ids, per_subject, seed=0))]
fn pair_subjects_prompts(
    subject_ids: Vec<String>,
    prompt_ids: Vec<String>,
    per_subject: usize,
    seed: u64,
) -> PyResult<BTreeMap<String, Vec<String>>> {
    prompts::pair_subjects_prompts(&subject_ids, &prompt_ids, per_subject, seed).map_err(value_err)
}

/// Every prompt a template grammar produces, as dicts.
#[pyfunction]
fn expand_grammar<'py>(py: Python<'py>, grammar: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let g = TemplateGrammar::parse(grammar).map_err(value_err)?;
    let out = prompts::expand_grammar(&g).map_err(value_err)?;
    out.into_iter()
        .map(|p| {
            let d = PyDict::new(py);
            d.set_item("text", p.text)?;
            d.set_item("rule_id", p.trace.rule_id)?;
            d.set_item("fillers", p.trace.fillers)?;
            d.set_item("referenced_objects", p.referenced_objects)?;
            let triplets: Vec<(String, String, String)> = p
                .annotated_triplets
                .into_iter()
                .map(|t| (t.subject_slot, t.predicate, t.object))
                .collect();
            d.set_item("annotated_triplets", triplets)?;
            d.set_item("themes", p.themes)?;
            Ok(d)
        })
        .collect()
}

/// Closed-form number of prompts `expand_grammar` yields.
#[pyfunction]
fn expansion_count(grammar: &str) -> PyResult<u128> {
    Ok(TemplateGrammar::parse(grammar).map_err(value_err)?.expansion_count())
}

#[pymodule]
#[pyo3(name = "personaeval")]
fn personaeval_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMetricReport>()?;
    m.add_class::<PyCorrelationTable>()?;
    m.add_function(wrap_pyfunction!(run_eval, m)?)?;
    m.add_function(wrap_pyfunction!(correlate, m)?)?;
    m.add_function(wrap_pyfunction!(majority_filter, m)?)?;
    m.add_function(wrap_pyfunction!(kendall_tau, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(penalty_indicator, m)?)?;
    m.add_function(wrap_pyfunction!(farthest_point_sample, m)?)?;
    m.add_function(wrap_pyfunction!(pair_subjects_prompts, m)?)?;
    m.add_function(wrap_pyfunction!(expand_grammar, m)?)?;
    m.add_function(wrap_pyfunction!(expansion_count, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
