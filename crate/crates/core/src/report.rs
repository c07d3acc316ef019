//! Evaluation reports and their JSON, CSV and markdown renderings.
//!
//! JSON output is canonical: keys sorted, floats at full round-trip
//! precision. CSV keeps full precision too; markdown shows 3 decimals.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        source: std::io::Error,
    },
    #[error("report json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error("unknown format {0:?} (expected json, csv or markdown)")]
    Format(String),
}

/// Per-sample outcome of one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricValue {
    Value(f64),
    NotApplicable(String),
    Failed(String),
    /// The metric is only defined over a method's whole sample pool.
    Pooled { included: bool },
}

impl MetricValue {
    pub fn value(&self) -> Option<f64> {
        match self {
            MetricValue::Value(v) => Some(*v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub method_id: String,
    pub sample_id: String,
    pub metrics: BTreeMap<String, MetricValue>,
    /// Whether this sample's own input/output pair failed the copy penalty.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalized: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub value: Option<f64>,
    pub n_applicable: usize,
    pub n_penalized: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CoverageStats {
    pub samples: usize,
    pub failed_samples: usize,
    pub input_without_face: usize,
    pub output_without_admissible_face: usize,
    pub penalized: usize,
    pub relations_annotated: usize,
    pub relations_unmatched: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aps_coverage: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub aps_per_attribute_auc: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub method_id: String,
    pub sample_id: String,
    pub metric: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub report_version: u32,
    pub manifest_hash: String,
    pub metrics: Vec<String>,
    pub methods: Vec<String>,
    /// Ordered by (method_id, sample_id).
    pub samples: Vec<SampleResult>,
    /// method -> metric -> aggregate.
    pub aggregates: BTreeMap<String, BTreeMap<String, Aggregate>>,
    pub coverage: BTreeMap<String, CoverageStats>,
    pub failures: Vec<Failure>,
    pub config_snapshot: serde_json::Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
    Markdown,
}

impl FromStr for Format {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            "markdown" | "md" | "markdown-table" => Ok(Format::Markdown),
            other => Err(ReportError::Format(other.to_string())),
        }
    }
}

impl Format {
    /// Guesses from a file extension, defaulting to JSON.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Format::Csv,
            Some("md") => Format::Markdown,
            _ => Format::Json,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MetricGroup {
    ImgToImg,
    TextToImg,
    Personalized,
    Human,
    Other,
}

impl MetricGroup {
    pub fn label(self) -> &'static str {
        match self {
            MetricGroup::ImgToImg => "Img-to-Img",
            MetricGroup::TextToImg => "Text-to-Img",
            MetricGroup::Personalized => "Personalized",
            MetricGroup::Human | MetricGroup::Other => "",
        }
    }
}

/// Known metric keys in table order with display names.
const CATALOG: &[(&str, &str, MetricGroup)] = &[
    ("aesthetic", "Aesth", MetricGroup::ImgToImg),
    ("clip_i", "CLIP_I", MetricGroup::ImgToImg),
    ("dreamsim", "DreamSim", MetricGroup::ImgToImg),
    ("clip_t", "CLIP_T", MetricGroup::TextToImg),
    ("hpsv1", "HPSv1", MetricGroup::TextToImg),
    ("hpsv2", "HPSv2", MetricGroup::TextToImg),
    ("image_reward", "ImageReward", MetricGroup::TextToImg),
    ("pickscore", "PickScore", MetricGroup::TextToImg),
    ("goa", "GoA", MetricGroup::Personalized),
    ("rfs", "RFS", MetricGroup::Personalized),
    ("aps", "APS", MetricGroup::Personalized),
    ("sis", "SIS", MetricGroup::Personalized),
    ("sis_fast", "SIS_fast", MetricGroup::Personalized),
    ("ips", "IPS", MetricGroup::Personalized),
    ("human_preference", "Human Preference", MetricGroup::Human),
];

pub fn display_name(metric: &str) -> &str {
    CATALOG
        .iter()
        .find(|(k, _, _)| *k == metric)
        .map_or(metric, |(_, d, _)| d)
}

fn table_position(metric: &str) -> (MetricGroup, usize) {
    CATALOG
        .iter()
        .position(|(k, _, _)| *k == metric)
        .map_or((MetricGroup::Other, usize::MAX), |i| (CATALOG[i].2, i))
}

pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn split_csv_line(line: &str) -> Vec<String> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => fields.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    fields.push(cur);
    fields
}

pub const CSV_HEADER: &str = "method_id,metric,aggregate,n_applicable,n_penalized,n_failed";

impl MetricReport {
    pub fn empty() -> Self {
        MetricReport {
            report_version: REPORT_VERSION,
            manifest_hash: String::new(),
            metrics: Vec::new(),
            methods: Vec::new(),
            samples: Vec::new(),
            aggregates: BTreeMap::new(),
            coverage: BTreeMap::new(),
            failures: Vec::new(),
            config_snapshot: serde_json::Value::Object(Default::default()),
        }
    }

    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("report serializes");
        serde_json::to_string_pretty(&value).expect("value serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, ReportError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ReportError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ReportError::Write {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn aggregate(&self, method: &str, metric: &str) -> Option<f64> {
        self.aggregates.get(method)?.get(metric)?.value
    }

    /// One row per (method, metric) aggregate.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for (method, metrics) in &self.aggregates {
            for (metric, a) in metrics {
                let v = a.value.map(|v| v.to_string()).unwrap_or_default();
                out.push_str(&format!(
                    "{},{},{v},{},{},{}\n",
                    csv_field(method),
                    csv_field(metric),
                    a.n_applicable,
                    a.n_penalized,
                    a.n_failed
                ));
            }
        }
        out
    }

    /// Reads aggregates back from [`MetricReport::to_csv`] output.
    pub fn aggregates_from_csv(text: &str) -> Result<BTreeMap<String, BTreeMap<String, Aggregate>>, ReportError> {
        let mut out: BTreeMap<String, BTreeMap<String, Aggregate>> = BTreeMap::new();
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == CSV_HEADER => {}
            _ => {
                return Err(ReportError::Csv {
                    line: 1,
                    message: "missing header".into(),
                })
            }
        }
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let err = |message: String| ReportError::Csv { line: i + 1, message };
            let f = split_csv_line(line);
            if f.len() != 6 {
                return Err(err(format!("expected 6 fields, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|e| err(e.to_string()));
            let value = if f[2].is_empty() {
                None
            } else {
                Some(f[2].parse::<f64>().map_err(|e| err(e.to_string()))?)
            };
            out.entry(f[0].clone()).or_default().insert(
                f[1].clone(),
                Aggregate {
                    value,
                    n_applicable: num(&f[3])?,
                    n_penalized: num(&f[4])?,
                    n_failed: num(&f[5])?,
                },
            );
        }
        Ok(out)
    }

    /// Method columns, metric rows grouped by metric family; `columns`
    /// overrides the method order.
    pub fn to_markdown(&self, columns: Option<&[String]>) -> String {
        let methods: Vec<&String> = match columns {
            Some(c) => c.iter().collect(),
            None => self.methods.iter().collect(),
        };
        let mut out = String::from("| Metric |");
        for m in &methods {
            out.push_str(&format!(" {m} |"));
        }
        out.push_str(" Type |\n|---|");
        out.push_str(&"---:|".repeat(methods.len()));
        out.push_str("---|\n");

        let mut rows: Vec<&String> = self.metrics.iter().collect();
        rows.sort_by(|a, b| table_position(a).cmp(&table_position(b)).then(a.cmp(b)));
        let mut last_group = None;
        for metric in rows {
            let group = table_position(metric).0;
            let label = if last_group != Some(group) { group.label() } else { "" };
            last_group = Some(group);
            out.push_str(&format!("| {} |", display_name(metric)));
            for m in &methods {
                let cell = self
                    .aggregate(m, metric)
                    .map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"));
                out.push_str(&format!(" {cell} |"));
            }
            out.push_str(&format!(" {label} |\n"));
        }
        out
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Json => self.canonical_json(),
            Format::Csv => self.to_csv(),
            Format::Markdown => self.to_markdown(None),
        }
    }

    pub fn emit(&self, format: Format, path: &Path) -> Result<(), ReportError> {
        write_output(path, &self.render(format))
    }
}

pub fn write_output(path: &Path, text: &str) -> Result<(), ReportError> {
    std::fs::write(path, text).map_err(|source| ReportError::Write {
        path: path.display().to_string(),
        source,
    })
}
