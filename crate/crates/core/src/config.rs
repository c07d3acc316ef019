//! Evaluation run configuration (TOML).
//!
//! ```toml
//! metrics = ["ips", "sis", "goa", "rfs"]
//!
//! [penalty]
//! mode = "additive"          # or "literal-multiplicative"
//! sigma = "estimate"         # or a number
//!
//! [identity]
//! alpha = 0.8
//! similarity_floor = "clamp-at-zero"
//! classifier_bank = "bank.json"   # needed for aps
//!
//! [context]
//! detector_floor = 0.0
//! relation_map = "relations.txt"
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{ObjectMatchConfig, PluralRule};
use crate::identity::{IdentityScoreConfig, InputFaceRule, SimilarityFloor};
use crate::penalty::PenaltyConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("unknown metric {0:?}")]
    UnknownMetric(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Ips,
    Aps,
    Sis,
    SisFast,
    Goa,
    Rfs,
    /// Text-image score of the prompt against the output.
    ClipT,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::Ips,
        Metric::Aps,
        Metric::Sis,
        Metric::SisFast,
        Metric::Goa,
        Metric::Rfs,
        Metric::ClipT,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Metric::Ips => "ips",
            Metric::Aps => "aps",
            Metric::Sis => "sis",
            Metric::SisFast => "sis_fast",
            Metric::Goa => "goa",
            Metric::Rfs => "rfs",
            Metric::ClipT => "clip_t",
        }
    }

    pub fn uses_penalty(self) -> bool {
        matches!(self, Metric::Ips | Metric::Aps | Metric::Sis | Metric::SisFast)
    }

    /// Backend roles the metric calls.
    pub fn required_roles(self) -> &'static [&'static str] {
        match self {
            Metric::Ips | Metric::Aps | Metric::Sis | Metric::SisFast => {
                &["face_detector", "face_embedder", "text_image_scorer"]
            }
            Metric::Goa => &["object_detector"],
            Metric::Rfs => &["scene_graph_generator"],
            Metric::ClipT => &["text_image_scorer"],
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Metric {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metric::ALL
            .into_iter()
            .find(|m| m.key() == s.trim())
            .ok_or_else(|| ConfigError::UnknownMetric(s.to_string()))
    }
}

/// Parses `ips,sis,goa`.
pub fn parse_metric_list(s: &str) -> Result<Vec<Metric>, ConfigError> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(Metric::from_str)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentitySection {
    pub alpha: Option<f64>,
    pub similarity_floor: Option<SimilarityFloor>,
    pub multi_face_input_rule: Option<InputFaceRule>,
    pub classifier_bank: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextSection {
    pub human_synonyms: Option<Vec<String>>,
    pub detector_floor: Option<f64>,
    pub plural_rules: Option<Vec<PluralRule>>,
    pub min_stem: Option<usize>,
    pub relation_map: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_metrics")]
    pub metrics: Vec<Metric>,
    #[serde(default)]
    pub penalty: PenaltyConfig,
    #[serde(default)]
    pub identity: IdentitySection,
    #[serde(default)]
    pub context: ContextSection,
}

fn default_metrics() -> Vec<Metric> {
    Metric::ALL.to_vec()
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            metrics: default_metrics(),
            penalty: PenaltyConfig::default(),
            identity: IdentitySection::default(),
            context: ContextSection::default(),
        }
    }
}

impl EvalConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Self::from_toml_at(text, Path::new("<inline>"))
    }

    fn from_toml_at(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let mut cfg: EvalConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        cfg.metrics.sort();
        cfg.metrics.dedup();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and resolves relative paths against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut cfg = Self::from_toml_at(&text, path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for p in [&mut cfg.identity.classifier_bank, &mut cfg.context.relation_map]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn identity_config(&self) -> IdentityScoreConfig {
        let d = IdentityScoreConfig::default();
        IdentityScoreConfig {
            alpha: self.identity.alpha.unwrap_or(d.alpha),
            similarity_floor: self.identity.similarity_floor.unwrap_or(d.similarity_floor),
            multi_face_input_rule: self.identity.multi_face_input_rule.unwrap_or(d.multi_face_input_rule),
        }
    }

    pub fn match_config(&self) -> ObjectMatchConfig {
        let d = ObjectMatchConfig::default();
        let c = &self.context;
        ObjectMatchConfig {
            plural_rules: c.plural_rules.clone().unwrap_or(d.plural_rules),
            min_stem: c.min_stem.unwrap_or(d.min_stem),
            detector_floor: c.detector_floor.unwrap_or(d.detector_floor),
            human_synonyms: c.human_synonyms.clone().unwrap_or(d.human_synonyms),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.identity_config().validate().map_err(ConfigError::Invalid)?;
        self.match_config().validate().map_err(ConfigError::Invalid)
    }
}
