//! Agreement between metrics and human votes.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::report::{display_name, MetricReport, MetricValue};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("need at least 2 observations, got {0}")]
    TooShort(usize),
    #[error("non-finite value")]
    NonFinite,
    #[error("vote file line {line}: {message}")]
    VoteParse { line: usize, message: String },
    #[error("trial {trial_id}: {message}")]
    InvalidVote { trial_id: String, message: String },
    #[error("trial {trial_id}: report has no sample {sample_ref:?} for method {method_id:?}")]
    Unresolved {
        trial_id: String,
        method_id: String,
        sample_ref: String,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Study {
    Obj,
    Rel,
    Overall,
}

impl Study {
    pub const ALL: [Study; 3] = [Study::Obj, Study::Rel, Study::Overall];

    pub fn key(self) -> &'static str {
        match self {
            Study::Obj => "obj",
            Study::Rel => "rel",
            Study::Overall => "overall",
        }
    }

    fn title(self) -> &'static str {
        match self {
            Study::Obj => "Obj",
            Study::Rel => "Rel",
            Study::Overall => "Overall",
        }
    }
}

impl fmt::Display for Study {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HumanVoteRecord {
    pub trial_id: String,
    pub study: Study,
    pub candidate_method_ids: Vec<String>,
    /// One chosen method id per rater.
    pub votes: Vec<String>,
    pub sample_ref: String,
}

impl HumanVoteRecord {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        let invalid = |message: String| AnalysisError::InvalidVote {
            trial_id: self.trial_id.clone(),
            message,
        };
        if self.candidate_method_ids.len() < 2 {
            return Err(invalid("fewer than 2 candidates".into()));
        }
        if self.votes.is_empty() {
            return Err(invalid("no votes".into()));
        }
        if let Some(v) = self.votes.iter().find(|v| !self.candidate_method_ids.contains(v)) {
            return Err(invalid(format!("vote for {v:?}, which is not a candidate")));
        }
        if matches!(self.study, Study::Obj | Study::Rel) && self.candidate_method_ids.len() != 2 {
            return Err(invalid(format!(
                "{} study must compare exactly 2 methods",
                self.study
            )));
        }
        Ok(())
    }

    /// Candidate holding a strict majority of the votes.
    pub fn majority(&self) -> Option<&str> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for v in &self.votes {
            *counts.entry(v.as_str()).or_default() += 1;
        }
        counts
            .into_iter()
            .find(|(_, c)| 2 * c > self.votes.len())
            .map(|(m, _)| m)
    }
}

pub fn parse_votes(text: &str) -> Result<Vec<HumanVoteRecord>, AnalysisError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: HumanVoteRecord = serde_json::from_str(line).map_err(|e| AnalysisError::VoteParse {
            line: i + 1,
            message: e.to_string(),
        })?;
        record.validate()?;
        out.push(record);
    }
    Ok(out)
}

pub fn load_votes(path: impl AsRef<Path>) -> Result<Vec<HumanVoteRecord>, AnalysisError> {
    parse_votes(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MajorityOutcome {
    pub kept: Vec<(HumanVoteRecord, String)>,
    pub discarded: usize,
}

impl MajorityOutcome {
    pub fn kept_fraction(&self) -> Option<f64> {
        let total = self.kept.len() + self.discarded;
        (total > 0).then(|| self.kept.len() as f64 / total as f64)
    }
}

/// Keeps records where one candidate holds a strict majority, with that
/// candidate attached as the winner.
pub fn majority_filter(votes: &[HumanVoteRecord]) -> MajorityOutcome {
    let mut kept = Vec::new();
    let mut discarded = 0;
    for r in votes {
        match r.majority() {
            Some(w) => kept.push((r.clone(), w.to_string())),
            None => discarded += 1,
        }
    }
    MajorityOutcome { kept, discarded }
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<(), AnalysisError> {
    if x.len() != y.len() {
        return Err(AnalysisError::Length(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(AnalysisError::TooShort(x.len()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    Ok(())
}

/// Number of pairs inside runs of equal adjacent elements.
fn tied_pairs<T: PartialEq>(sorted: &[T]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Sorts `v` and returns the number of inversions removed.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid], &mut buf[..mid]) + merge_count(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Final tau-b expression shared with the brute-force check in the tests.
pub fn tau_b_from_counts(concordant_minus_discordant: i64, untied_x: u64, untied_y: u64) -> Option<f64> {
    if untied_x == 0 || untied_y == 0 {
        return None;
    }
    Some(concordant_minus_discordant as f64 / ((untied_x as f64) * (untied_y as f64)).sqrt())
}

/// Tie-corrected Kendall rank correlation in O(n log n). `None` when either
/// side is constant.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<Option<f64>, AnalysisError> {
    check_pair(x, y)?;
    let n = x.len() as u64;
    let mut pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.partial_cmp(&b.1).unwrap()));
    let n0 = n * (n - 1) / 2;
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let n1 = tied_pairs(&xs);
    let n3 = tied_pairs(&pairs);
    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0; ys.len()];
    let swaps = merge_count(&mut ys, &mut buf);
    let n2 = tied_pairs(&ys);
    let c_minus_d = n0 as i64 - n1 as i64 - n2 as i64 + n3 as i64 - 2 * swaps as i64;
    Ok(tau_b_from_counts(c_minus_d, n0 - n1, n0 - n2))
}

/// Product-moment correlation. `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Option<f64>, AnalysisError> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)))
}

pub const PAIRWISE_REDUCTION: &str = "per-trial sign of score difference vs human choice, both candidate orders";
pub const OVERALL_REDUCTION: &str = "per (trial, candidate): human winner indicator vs metric argmax indicator";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PearsonMatrix {
    pub metrics: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
    pub observations: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub rows: Vec<String>,
    pub columns: Vec<Study>,
    /// metric -> study -> tau-b, `None` when undefined.
    pub values: BTreeMap<String, BTreeMap<String, Option<f64>>>,
    /// metric -> study -> trials that entered the correlation.
    pub trials: BTreeMap<String, BTreeMap<String, usize>>,
    pub pearson: PearsonMatrix,
    pub votes_total: usize,
    pub votes_kept: usize,
    pub config_snapshot: serde_json::Value,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Human-preference and metric-preference vectors for one metric and study.
pub fn preference_vectors(
    kept: &[(HumanVoteRecord, String)],
    study: Study,
    score: impl Fn(&str, &str) -> Option<f64>,
) -> (Vec<f64>, Vec<f64>, usize) {
    let (mut h, mut m, mut used) = (Vec::new(), Vec::new(), 0);
    for (record, winner) in kept.iter().filter(|(r, _)| r.study == study) {
        let scores: Option<Vec<f64>> = record
            .candidate_method_ids
            .iter()
            .map(|c| score(c, &record.sample_ref))
            .collect();
        let Some(scores) = scores else { continue };
        used += 1;
        match study {
            Study::Obj | Study::Rel => {
                let hv = if *winner == record.candidate_method_ids[0] { 1.0 } else { -1.0 };
                let mv = sign(scores[0] - scores[1]);
                h.extend([hv, -hv]);
                m.extend([mv, -mv]);
            }
            Study::Overall => {
                let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for (c, s) in record.candidate_method_ids.iter().zip(&scores) {
                    h.push(if c == winner { 1.0 } else { 0.0 });
                    m.push(if *s == best { 1.0 } else { 0.0 });
                }
            }
        }
    }
    (h, m, used)
}

/// Kendall tau-b per metric and study between human winners and metric
/// preferences, plus the inter-metric Pearson matrix over samples.
pub fn correlate(report: &MetricReport, votes: &[HumanVoteRecord]) -> Result<CorrelationTable, AnalysisError> {
    let mut index: HashMap<(&str, &str), &BTreeMap<String, MetricValue>> = HashMap::new();
    for s in &report.samples {
        index.insert((s.method_id.as_str(), s.sample_id.as_str()), &s.metrics);
    }
    for r in votes {
        r.validate()?;
        for c in &r.candidate_method_ids {
            if !index.contains_key(&(c.as_str(), r.sample_ref.as_str())) {
                return Err(AnalysisError::Unresolved {
                    trial_id: r.trial_id.clone(),
                    method_id: c.clone(),
                    sample_ref: r.sample_ref.clone(),
                });
            }
        }
    }
    let filtered = majority_filter(votes);
    let mut values = BTreeMap::new();
    let mut trials = BTreeMap::new();
    for metric in &report.metrics {
        let score = |method: &str, sample: &str| match index.get(&(method, sample))?.get(metric)? {
            MetricValue::Value(v) => Some(*v),
            _ => None,
        };
        let mut row = BTreeMap::new();
        let mut counts = BTreeMap::new();
        for study in Study::ALL {
            let (h, m, used) = preference_vectors(&filtered.kept, study, score);
            let tau = if h.len() >= 2 { kendall_tau(&h, &m)? } else { None };
            row.insert(study.key().to_string(), tau);
            counts.insert(study.key().to_string(), used);
        }
        values.insert(metric.clone(), row);
        trials.insert(metric.clone(), counts);
    }

    let k = report.metrics.len();
    let mut pv = vec![vec![None; k]; k];
    let mut obs = vec![vec![0usize; k]; k];
    for i in 0..k {
        for j in 0..k {
            let (mut x, mut y) = (Vec::new(), Vec::new());
            for s in &report.samples {
                if let (Some(MetricValue::Value(a)), Some(MetricValue::Value(b))) =
                    (s.metrics.get(&report.metrics[i]), s.metrics.get(&report.metrics[j]))
                {
                    x.push(*a);
                    y.push(*b);
                }
            }
            obs[i][j] = x.len();
            pv[i][j] = if x.len() >= 2 { pearson(&x, &y)? } else { None };
        }
    }

    let mut snapshot = report.config_snapshot.clone();
    if let serde_json::Value::Object(map) = &mut snapshot {
        map.insert(
            "correlate".into(),
            serde_json::json!({
                "pairwise_reduction": PAIRWISE_REDUCTION,
                "overall_reduction": OVERALL_REDUCTION,
                "tau_variant": "tau-b",
                "majority": "strict",
                "pearson": "pairwise-complete per-sample values",
            }),
        );
    }
    Ok(CorrelationTable {
        rows: report.metrics.clone(),
        columns: Study::ALL.to_vec(),
        values,
        trials,
        pearson: PearsonMatrix {
            metrics: report.metrics.clone(),
            values: pv,
            observations: obs,
        },
        votes_total: votes.len(),
        votes_kept: filtered.kept.len(),
        config_snapshot: snapshot,
    })
}

fn fmt3(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"))
}

impl CorrelationTable {
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("table serializes");
        serde_json::to_string_pretty(&value).expect("value serializes") + "\n"
    }

    pub fn get(&self, metric: &str, study: Study) -> Option<f64> {
        self.values.get(metric)?.get(study.key()).copied().flatten()
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Metric |");
        for c in &self.columns {
            out.push_str(&format!(" {} |", c.title()));
        }
        out.push_str("\n|---|");
        out.push_str(&"---:|".repeat(self.columns.len()));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("| {} |", display_name(row)));
            for c in &self.columns {
                out.push_str(&format!(" {} |", fmt3(self.get(row, *c))));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,study,tau_b,trials\n");
        for row in &self.rows {
            for c in &self.columns {
                let tau = self.get(row, *c).map(|v| v.to_string()).unwrap_or_default();
                let n = self.trials.get(row).and_then(|t| t.get(c.key())).copied().unwrap_or(0);
                out.push_str(&format!("{},{},{tau},{n}\n", crate::report::csv_field(row), c.key()));
            }
        }
        out
    }
}
