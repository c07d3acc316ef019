//! Context scores: grounding of prompt objects (GOA) and fidelity of the
//! prompted human-object relations (RFS).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, BackendSuite, Detection, SceneGraph};
use crate::data::{AnnotatedTriplet, ImageRef, PromptRecord};
use crate::vector;

#[derive(Debug, Error)]
pub enum ContextError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("relation map line {line}: {message}")]
    MapParse { line: usize, message: String },
    #[error("relation map targets {target:?}, which the scene-graph vocabulary lacks")]
    UnknownTarget { target: String },
    #[error("embed-nearest mapping needs a sentence embedder")]
    NoEmbedder,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PluralRule {
    pub suffix: String,
    pub replacement: String,
    #[serde(default)]
    pub except: Vec<String>,
}

impl PluralRule {
    fn new(suffix: &str, replacement: &str, except: &[&str]) -> Self {
        PluralRule {
            suffix: suffix.into(),
            replacement: replacement.into(),
            except: except.iter().map(|s| s.to_string()).collect(),
        }
    }
}

fn default_plural_rules() -> Vec<PluralRule> {
    vec![
        PluralRule::new("ies", "y", &[]),
        PluralRule::new("sses", "ss", &[]),
        PluralRule::new("shes", "sh", &[]),
        PluralRule::new("ches", "ch", &[]),
        PluralRule::new("xes", "x", &[]),
        PluralRule::new("s", "", &["ss", "us", "is"]),
    ]
}

fn default_human_synonyms() -> Vec<String> {
    [
        "person", "man", "woman", "human", "boy", "girl", "child", "kid", "lady", "guy", "people",
        "men", "women", "player", "skier", "surfer", "rider",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn default_min_stem() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectMatchConfig {
    /// First matching rule is applied to the last word of a label.
    #[serde(default = "default_plural_rules")]
    pub plural_rules: Vec<PluralRule>,
    /// Shortest singular form a plural rule may produce.
    #[serde(default = "default_min_stem")]
    pub min_stem: usize,
    /// Detections below this confidence are ignored.
    #[serde(default)]
    pub detector_floor: f64,
    #[serde(default = "default_human_synonyms")]
    pub human_synonyms: Vec<String>,
}

impl Default for ObjectMatchConfig {
    fn default() -> Self {
        ObjectMatchConfig {
            plural_rules: default_plural_rules(),
            min_stem: default_min_stem(),
            detector_floor: 0.0,
            human_synonyms: default_human_synonyms(),
        }
    }
}

impl ObjectMatchConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.detector_floor) {
            return Err(format!(
                "context.detector_floor must lie in [0,1], got {}",
                self.detector_floor
            ));
        }
        Ok(())
    }

    /// Lowercase, whitespace-collapsed, singularized label.
    pub fn canonicalize(&self, label: &str) -> String {
        let lower = label.to_lowercase();
        let mut words: Vec<&str> = lower.split_whitespace().collect();
        let Some(last) = words.pop() else {
            return String::new();
        };
        let mut singular = last.to_string();
        for rule in &self.plural_rules {
            if last.ends_with(&rule.suffix) && !rule.except.iter().any(|e| last.ends_with(e.as_str())) {
                let stem = &last[..last.len() - rule.suffix.len()];
                let candidate = format!("{stem}{}", rule.replacement);
                if candidate.chars().count() >= self.min_stem {
                    singular = candidate;
                }
                break;
            }
        }
        words.push(&singular);
        words.join(" ")
    }

    pub fn is_human(&self, label: &str) -> bool {
        let c = self.canonicalize(label);
        self.human_synonyms.iter().any(|h| self.canonicalize(h) == c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnmappedPolicy {
    #[default]
    ZeroScore,
    EmbedNearest,
}

impl fmt::Display for UnmappedPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UnmappedPolicy::ZeroScore => "zero-score",
            UnmappedPolicy::EmbedNearest => "embed-nearest",
        })
    }
}

/// Annotated predicate to scene-graph predicate.
///
/// Text form, one entry per line, `#` starts a comment:
///
/// ```text
/// policy: zero-score
/// juggling -> holding
/// ```
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RelationVocabularyMap {
    pub entries: BTreeMap<String, String>,
    pub unmapped_policy: UnmappedPolicy,
}

impl RelationVocabularyMap {
    pub fn parse(text: &str) -> Result<Self, ContextError> {
        let mut map = RelationVocabularyMap::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| ContextError::MapParse { line: i + 1, message };
            if let Some(policy) = line.strip_prefix("policy:") {
                map.unmapped_policy = match policy.trim() {
                    "zero-score" => UnmappedPolicy::ZeroScore,
                    "embed-nearest" => UnmappedPolicy::EmbedNearest,
                    other => return Err(err(format!("unknown policy {other:?}"))),
                };
            } else if let Some((from, to)) = line.split_once("->") {
                let (from, to) = (from.trim(), to.trim());
                if from.is_empty() || to.is_empty() {
                    return Err(err("empty side in mapping".into()));
                }
                if map.entries.insert(from.to_string(), to.to_string()).is_some() {
                    return Err(err(format!("{from:?} mapped twice")));
                }
            } else {
                return Err(err(format!("expected `a -> b` or `policy: ...`, got {line:?}")));
            }
        }
        Ok(map)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ContextError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("policy: {}\n", self.unmapped_policy);
        for (from, to) in &self.entries {
            out.push_str(&format!("{from} -> {to}\n"));
        }
        out
    }

    /// Every explicit target must exist in `vocabulary`.
    pub fn validate(&self, vocabulary: &[String]) -> Result<(), ContextError> {
        for target in self.entries.values() {
            if !vocabulary.contains(target) {
                return Err(ContextError::UnknownTarget {
                    target: target.clone(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MappingSource {
    Explicit,
    Identity,
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RelationMapping {
    Mapped { predicate: String, source: MappingSource },
    Unmapped,
}

impl RelationMapping {
    pub fn predicate(&self) -> Option<&str> {
        match self {
            RelationMapping::Mapped { predicate, .. } => Some(predicate),
            RelationMapping::Unmapped => None,
        }
    }
}

/// Resolves each annotated predicate into the scene-graph vocabulary.
/// Explicit entries win, then exact vocabulary membership, then the
/// unmapped policy.
pub fn map_relations(
    triplets: &[AnnotatedTriplet],
    vocabulary: &[String],
    map: &RelationVocabularyMap,
    embedder: Option<&BackendSuite>,
) -> Result<Vec<(AnnotatedTriplet, RelationMapping)>, ContextError> {
    let mut vocab_embeddings: Option<Vec<Vec<f64>>> = None;
    let mut out = Vec::with_capacity(triplets.len());
    for t in triplets {
        let mapping = if let Some(target) = map.entries.get(&t.predicate) {
            RelationMapping::Mapped {
                predicate: target.clone(),
                source: MappingSource::Explicit,
            }
        } else if vocabulary.contains(&t.predicate) {
            RelationMapping::Mapped {
                predicate: t.predicate.clone(),
                source: MappingSource::Identity,
            }
        } else {
            match map.unmapped_policy {
                UnmappedPolicy::ZeroScore => RelationMapping::Unmapped,
                UnmappedPolicy::EmbedNearest if vocabulary.is_empty() => RelationMapping::Unmapped,
                UnmappedPolicy::EmbedNearest => {
                    let suite = embedder.ok_or(ContextError::NoEmbedder)?;
                    if vocab_embeddings.is_none() {
                        vocab_embeddings = Some(
                            vocabulary
                                .iter()
                                .map(|v| suite.embed_sentence(v))
                                .collect::<Result<_, _>>()?,
                        );
                    }
                    let query = suite.embed_sentence(&t.predicate)?;
                    let mut best = (f64::NEG_INFINITY, 0usize);
                    for (i, e) in vocab_embeddings.as_ref().unwrap().iter().enumerate() {
                        let c = vector::cosine(&query, e);
                        if c > best.0 {
                            best = (c, i);
                        }
                    }
                    RelationMapping::Mapped {
                        predicate: vocabulary[best.1].clone(),
                        source: MappingSource::Nearest,
                    }
                }
            }
        };
        out.push((t.clone(), mapping));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoaOutcome {
    /// `None` when the prompt references no objects.
    pub value: Option<f64>,
    pub per_object: Vec<(String, f64)>,
}

/// Mean over referenced objects of the best detection confidence.
pub fn goa_from_detections(
    objects: &[String],
    detections: &[Detection],
    cfg: &ObjectMatchConfig,
) -> GoaOutcome {
    if objects.is_empty() {
        return GoaOutcome {
            value: None,
            per_object: Vec::new(),
        };
    }
    let per_object: Vec<(String, f64)> = objects
        .iter()
        .map(|object| {
            let target = cfg.canonicalize(object);
            let best = detections
                .iter()
                .filter(|d| d.confidence >= cfg.detector_floor && cfg.canonicalize(&d.label) == target)
                .map(|d| d.confidence)
                .fold(0.0, f64::max);
            (object.clone(), best)
        })
        .collect();
    let value = per_object.iter().map(|(_, c)| c).sum::<f64>() / objects.len() as f64;
    GoaOutcome {
        value: Some(value),
        per_object,
    }
}

pub fn goa(
    prompt: &PromptRecord,
    output: &ImageRef,
    suite: &BackendSuite,
    cfg: &ObjectMatchConfig,
) -> Result<GoaOutcome, ContextError> {
    if prompt.referenced_objects.is_empty() {
        return Ok(goa_from_detections(&[], &[], cfg));
    }
    let detections = suite.detect_objects(output, &prompt.referenced_objects)?;
    Ok(goa_from_detections(&prompt.referenced_objects, &detections, cfg))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RfsOutcome {
    /// `None` when the prompt has no annotated relations.
    pub value: Option<f64>,
    pub per_relation: Vec<f64>,
    /// Annotated relations without a surviving graph triplet, or unmapped.
    pub unmatched: usize,
}

/// Mean over annotated relations of the probability the best matching
/// human-subject graph triplet assigns to the mapped predicate.
pub fn rfs_from_graph(
    mapped: &[(AnnotatedTriplet, RelationMapping)],
    graph: &SceneGraph,
    cfg: &ObjectMatchConfig,
) -> RfsOutcome {
    if mapped.is_empty() {
        return RfsOutcome {
            value: None,
            per_relation: Vec::new(),
            unmatched: 0,
        };
    }
    let human: Vec<_> = graph
        .triplets
        .iter()
        .filter(|t| cfg.is_human(&t.subject_label))
        .collect();
    let mut unmatched = 0;
    let per_relation: Vec<f64> = mapped
        .iter()
        .map(|(triplet, mapping)| {
            let target = cfg.canonicalize(&triplet.object);
            let candidates: Vec<_> = human
                .iter()
                .filter(|t| cfg.canonicalize(&t.object_label) == target)
                .collect();
            match mapping.predicate() {
                Some(predicate) if !candidates.is_empty() => candidates
                    .iter()
                    .map(|t| t.relation_distribution.get(predicate).copied().unwrap_or(0.0))
                    .fold(0.0, f64::max),
                _ => {
                    unmatched += 1;
                    0.0
                }
            }
        })
        .collect();
    let value = per_relation.iter().sum::<f64>() / per_relation.len() as f64;
    RfsOutcome {
        value: Some(value),
        per_relation,
        unmatched,
    }
}

pub fn rfs(
    prompt: &PromptRecord,
    output: &ImageRef,
    suite: &BackendSuite,
    map: &RelationVocabularyMap,
    cfg: &ObjectMatchConfig,
) -> Result<RfsOutcome, ContextError> {
    if prompt.annotated_triplets.is_empty() {
        return Ok(rfs_from_graph(&[], &SceneGraph::default(), cfg));
    }
    let vocabulary = suite.predicate_vocabulary()?;
    let mapped = map_relations(&prompt.annotated_triplets, &vocabulary, map, Some(suite))?;
    let graph = suite.generate_scene_graph(output)?;
    Ok(rfs_from_graph(&mapped, &graph, cfg))
}
